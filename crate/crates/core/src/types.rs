//! Value types for videos, flows and masks.
//!
//! Pixel data is `f32` in `[0, 1]`, stored frame-major then row-major with
//! interleaved channels (`T × H × W × C`). Masks are `u8` in `{0, 1}`.

use crate::error::{Error, Result};

/// Clip of `T ≥ 2` RGB frames sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames < 2 {
            return Err(Error::InvalidValue(format!("clip needs at least 2 frames, got {frames}")));
        }
        Self::new_unchecked_len(frames, height, width, data)
    }

    /// Like [`VideoClip::new`] but allows single-frame clips (used for
    /// reference crops and per-frame encoders).
    pub fn new_unchecked_len(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::DimMismatch(format!(
                "clip {frames}x{height}x{width}x3 needs {} values, got {}",
                frames * height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidValue(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Self { frames, height, width, data, fps: 8.0 })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0.0; frames * height * width * 3], fps: 8.0 }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let o = ((t * self.height + y) * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Frames `start..start+len` as a new clip.
    pub fn slice(&self, start: usize, len: usize) -> VideoClip {
        let n = self.frame_len();
        VideoClip {
            frames: len,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
            fps: self.fps,
        }
    }

    /// Concatenate clips in time.
    pub fn concat(parts: &[&VideoClip]) -> Result<VideoClip> {
        let first = parts.first().ok_or_else(|| Error::InvalidValue("concat of no clips".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::DimMismatch("clip resolutions differ".into()));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Ok(VideoClip { frames, height: first.height, width: first.width, data, fps: first.fps })
    }

    /// Zero every pixel where the per-frame mask is 1.
    pub fn masked(&self, mask: &MaskSequence) -> Result<VideoClip> {
        check_dims(self.frames, self.height, self.width, mask.frames(), mask.height(), mask.width(), "masked")?;
        let mut out = self.clone();
        for (px, &m) in out.data.chunks_mut(3).zip(mask.data()) {
            if m == 1 {
                px.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Quantise to 8 bits and back, as PNG storage would.
    pub fn quantized(&self) -> VideoClip {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        out
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_dims(t1: usize, h1: usize, w1: usize, t2: usize, h2: usize, w2: usize, what: &str) -> Result<()> {
    if (t1, h1, w1) != (t2, h2, w2) {
        return Err(Error::DimMismatch(format!("{what}: {t1}x{h1}x{w1} vs {t2}x{h2}x{w2}")));
    }
    Ok(())
}

/// One `H × W × 3` image (the appearance reference crop).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::DimMismatch(format!("image {height}x{width}x3 vs {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Bilinear resize (align-corners = false).
    pub fn resize(&self, height: usize, width: usize) -> RgbImage {
        let mut out = vec![0.0; height * width * 3];
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let p = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * 3 + c];
                    let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    out[(y * width + x) * 3 + c] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        RgbImage { height, width, data: out }
    }
}

/// A single `H × W × 2` displacement field (`u` horizontal, `v` vertical).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::DimMismatch(format!("flow {height}x{width}x2 vs {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let o = (y * self.width + x) * 2;
        (self.data[o], self.data[o + 1])
    }
}

/// `T − 1` forward flow fields; field `t` maps frame `t` to frame `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    len: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowSequence {
    pub fn new(len: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != len * height * width * 2 {
            return Err(Error::DimMismatch(format!("flow sequence {len}x{height}x{width}x2 vs {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow sequence".into()));
        }
        Ok(Self { len, height, width, data })
    }

    pub fn zeros(len: usize, height: usize, width: usize) -> Self {
        Self { len, height, width, data: vec![0.0; len * height * width * 2] }
    }

    pub fn from_fields(fields: &[FlowField]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::InvalidValue("empty flow sequence".into()))?;
        let mut data = Vec::with_capacity(fields.len() * first.data.len());
        for f in fields {
            if (f.height, f.width) != (first.height, first.width) {
                return Err(Error::DimMismatch("flow field sizes differ".into()));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Self { len: fields.len(), height: first.height, width: first.width, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn field_slice(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 2;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn field_slice_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.height * self.width * 2;
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn field(&self, t: usize) -> FlowField {
        FlowField { height: self.height, width: self.width, data: self.field_slice(t).to_vec() }
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        let o = ((t * self.height + y) * self.width + x) * 2;
        (self.data[o], self.data[o + 1])
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, uv: (f32, f32)) {
        let o = ((t * self.height + y) * self.width + x) * 2;
        self.data[o] = uv.0;
        self.data[o + 1] = uv.1;
    }

    /// Fields `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> FlowSequence {
        let n = self.height * self.width * 2;
        FlowSequence { len, height: self.height, width: self.width, data: self.data[start * n..(start + len) * n].to_vec() }
    }

    /// Check pairing with a clip of `frames` frames at the same resolution.
    pub fn check_pairs_with(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        if self.len + 1 != frames || self.height != height || self.width != width {
            return Err(Error::DimMismatch(format!(
                "flow {}x{}x{} does not pair with clip {frames}x{height}x{width}",
                self.len, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Binary `H × W` map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!("mask {height}x{width} vs {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidValue("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Mask with the given `(row, col)` pixels set.
    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::zeros(height, width);
        for &(y, x) in points {
            m.set(y, x, 1);
        }
        m
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & b)
    }
    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a | b)
    }
    pub fn xor(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a ^ b)
    }
    /// `self ∧ ¬other`
    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & (1 - b))
    }
    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    /// Inclusive `(min_row, min_col, max_row, max_col)` of the set pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    /// Square dilation by `radius` pixels (Chebyshev ball).
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        // separable max filter: rows then columns
        let mut tmp = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                tmp[y * w + x] = self.data[y * w + lo..=y * w + hi].iter().copied().max().unwrap_or(0);
            }
        }
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).max().unwrap_or(0);
            }
        }
        Mask { height: h, width: w, data: out }
    }
}

/// `T` binary masks of equal size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::DimMismatch(format!("mask sequence {frames}x{height}x{width} vs {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidValue("mask values must be 0 or 1".into()));
        }
        Ok(Self { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width, data: vec![0; frames * height * width] }
    }

    pub fn from_masks(masks: &[Mask]) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::InvalidValue("empty mask sequence".into()))?;
        let mut data = Vec::with_capacity(masks.len() * first.data.len());
        for m in masks {
            first.same_dims(m)?;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { frames: masks.len(), height: first.height, width: first.width, data })
    }

    /// The same mask repeated `frames` times.
    pub fn repeat(mask: &Mask, frames: usize) -> Self {
        Self { frames, height: mask.height, width: mask.width, data: mask.data.repeat(frames) }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> Mask {
        let n = self.height * self.width;
        Mask { height: self.height, width: self.width, data: self.data[t * n..(t + 1) * n].to_vec() }
    }

    pub fn frame_slice(&self, t: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn set_frame(&mut self, t: usize, m: &Mask) {
        let n = self.height * self.width;
        self.data[t * n..(t + 1) * n].copy_from_slice(&m.data);
    }

    pub fn masks(&self) -> Vec<Mask> {
        (0..self.frames).map(|t| self.frame(t)).collect()
    }

    pub fn slice(&self, start: usize, len: usize) -> MaskSequence {
        let n = self.height * self.width;
        MaskSequence { frames: len, height: self.height, width: self.width, data: self.data[start * n..(start + len) * n].to_vec() }
    }

    pub fn same_dims(&self, other: &MaskSequence) -> Result<()> {
        check_dims(self.frames, self.height, self.width, other.frames, other.height, other.width, "mask sequences")
    }

    pub fn map_frames(&self, f: impl Fn(usize, &Mask) -> Mask) -> MaskSequence {
        let masks: Vec<Mask> = (0..self.frames).map(|t| f(t, &self.frame(t))).collect();
        MaskSequence::from_masks(&masks).expect("map_frames preserves dims")
    }

    pub fn and(&self, other: &MaskSequence) -> MaskSequence {
        self.zip(other, |a, b| a & b)
    }
    pub fn or(&self, other: &MaskSequence) -> MaskSequence {
        self.zip(other, |a, b| a | b)
    }
    pub fn minus(&self, other: &MaskSequence) -> MaskSequence {
        self.zip(other, |a, b| a & (1 - b))
    }

    fn zip(&self, other: &MaskSequence, f: impl Fn(u8, u8) -> u8) -> MaskSequence {
        assert_eq!(self.data.len(), other.data.len(), "mask sequence dims");
        MaskSequence {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Per-frame filled bounding boxes.
    pub fn bboxes(&self) -> MaskSequence {
        self.map_frames(|_, m| bbox_of(m))
    }
}

/// Partition of the pixels of a clip into clustered regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub regions: Vec<MaskSequence>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// True if every pixel of every frame belongs to exactly one region.
    pub fn is_partition(&self) -> bool {
        let Some(first) = self.regions.first() else { return false };
        let mut cover = vec![0u32; first.data.len()];
        for r in &self.regions {
            if r.data.len() != cover.len() {
                return false;
            }
            for (c, &v) in cover.iter_mut().zip(&r.data) {
                *c += v as u32;
            }
        }
        cover.iter().all(|&c| c == 1)
    }
}

/// One self-supervised training or inference tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub masked_video: VideoClip,
    pub ref_image: RgbImage,
    pub structure_mask: Mask,
    pub flow: FlowSequence,
    pub bbox_mask: MaskSequence,
    pub target_video: VideoClip,
    pub target_masks: MaskSequence,
}

/// Filled minimal axis-aligned rectangle covering the set pixels.
pub fn bbox_of(mask: &Mask) -> Mask {
    let mut out = Mask::zeros(mask.height, mask.width);
    if let Some((y0, x0, y1, x1)) = mask.bounds() {
        for y in y0..=y1 {
            for x in x0..=x1 {
                out.set(y, x, 1);
            }
        }
    }
    out
}

/// Pixels whose membership differs between the edited and the source
/// keyframe masks (`m_ref ≠ m0`).
pub fn edit_region(m_ref: &Mask, m0: &Mask) -> Result<Mask> {
    m_ref.same_dims(m0)?;
    Ok(m_ref.xor(m0))
}
