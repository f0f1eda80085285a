//! Middlebury `.flo` files and PNG frame/mask directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{quantize, FlowField, FlowSequence, Mask, MaskSequence, RgbImage, VideoClip};

pub const FLO_MAGIC: f32 = 202021.25;

/// Serialise one field in the `.flo` layout.
pub fn encode_flo(field: &FlowField) -> Result<Vec<u8>> {
    if field.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow field to write".into()));
    }
    let mut out = Vec::with_capacity(12 + field.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for v in &field.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse a `.flo` byte buffer.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Truncated { expected: 12, found: bytes.len() });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width < 0 || height < 0 {
        return Err(Error::InvalidValue(format!(".flo header declares {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let payload = width * height * 2 * 4;
    if bytes.len() - 12 < payload {
        return Err(Error::Truncated { expected: payload, found: bytes.len() - 12 });
    }
    let data: Vec<f32> = bytes[12..12 + payload].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(".flo payload".into()));
    }
    FlowField::new(height, width, data)
}

pub fn write_flo(path: &Path, field: &FlowField) -> Result<()> {
    let bytes = encode_flo(field)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

fn frame_path(dir: &Path, stem: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{index:05}.{ext}"))
}

/// Sorted indices of `{stem}_NNNNN.{ext}` files; errors on any gap.
fn indexed_files(dir: &Path, stem: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let prefix = format!("{stem}_");
    let suffix = format!(".{ext}");
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(num) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(&suffix)) {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected {
            return Err(Error::MissingFrame { dir: dir.display().to_string(), index: expected });
        }
    }
    Ok(indices.iter().map(|&i| frame_path(dir, stem, i, ext)).collect())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image { path: path.display().to_string(), msg: e.to_string() }
}

pub fn write_rgb_png(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::DimMismatch(format!("rgb buffer for {height}x{width}")))?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .ok_or_else(|| Error::DimMismatch("mask buffer".into()))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Read a grayscale mask; values ≥ 128 become 1.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    Mask::new(h as usize, w as usize, data)
}

pub fn write_clip(dir: &Path, clip: &VideoClip) -> Result<()> {
    ensure_dir(dir)?;
    for t in 0..clip.frames() {
        write_rgb_png(&frame_path(dir, "frame", t, "png"), clip.height(), clip.width(), clip.frame(t))?;
    }
    Ok(())
}

pub fn read_clip(dir: &Path) -> Result<VideoClip> {
    let paths = indexed_files(dir, "frame", "png")?;
    let mut data = Vec::new();
    let mut dims = None;
    for p in &paths {
        let img = read_rgb_png(p)?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::DimMismatch(format!("{} is {}x{}, expected {}x{}", p.display(), img.height, img.width, d.0, d.1)))
            }
            _ => {}
        }
        data.extend(img.data);
    }
    let (h, w) = dims.unwrap_or((0, 0));
    VideoClip::new(paths.len(), h, w, data)
}

pub fn write_masks(dir: &Path, masks: &MaskSequence) -> Result<()> {
    ensure_dir(dir)?;
    for t in 0..masks.frames() {
        write_mask_png(&frame_path(dir, "mask", t, "png"), &masks.frame(t))?;
    }
    Ok(())
}

pub fn read_masks(dir: &Path) -> Result<MaskSequence> {
    let paths = indexed_files(dir, "mask", "png")?;
    if paths.is_empty() {
        return Err(Error::MissingFrame { dir: dir.display().to_string(), index: 0 });
    }
    let masks = paths.iter().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
    MaskSequence::from_masks(&masks)
}

pub fn write_flow_dir(dir: &Path, flow: &FlowSequence) -> Result<()> {
    ensure_dir(dir)?;
    for t in 0..flow.len() {
        write_flo(&frame_path(dir, "flow", t, "flo"), &flow.field(t))?;
    }
    Ok(())
}

pub fn read_flow_dir(dir: &Path) -> Result<FlowSequence> {
    let paths = indexed_files(dir, "flow", "flo")?;
    if paths.is_empty() {
        return Err(Error::MissingFrame { dir: dir.display().to_string(), index: 0 });
    }
    let fields = paths.iter().map(|p| read_flo(p)).collect::<Result<Vec<_>>>()?;
    FlowSequence::from_fields(&fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_roundtrip_zeros() {
        let f = FlowField::zeros(2, 2);
        assert_eq!(decode_flo(&encode_flo(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn flo_header_and_payload_size() {
        let f = FlowField::new(2, 3, (0..12).map(|v| v as f32 * 0.25 - 1.0).collect()).unwrap();
        let b = encode_flo(&f).unwrap();
        assert_eq!(i32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len() - 12, 3 * 2 * 2 * 4);
        assert_eq!(decode_flo(&b).unwrap(), f);
    }

    #[test]
    fn flo_errors_are_distinct() {
        let mut b = encode_flo(&FlowField::zeros(2, 2)).unwrap();
        let mut bad = b.clone();
        bad[0] ^= 1;
        assert!(matches!(decode_flo(&bad), Err(Error::BadMagic(_))));
        assert!(matches!(decode_flo(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        b[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_flo(&b), Err(Error::NonFinite(_))));
        let nan = FlowField { height: 1, width: 1, data: vec![f32::INFINITY, 0.0] };
        assert!(matches!(encode_flo(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn clip_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 4 * 5 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let clip = VideoClip::new(3, 4, 5, data).unwrap();
        write_clip(dir.path(), &clip).unwrap();
        assert_eq!(read_clip(dir.path()).unwrap(), clip.quantized());

        let masks = MaskSequence::new(3, 4, 5, (0..60).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        write_masks(dir.path(), &masks).unwrap();
        assert_eq!(read_masks(dir.path()).unwrap(), masks);
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::zeros(4, 2, 2);
        write_clip(dir.path(), &clip).unwrap();
        fs::remove_file(dir.path().join("frame_00002.png")).unwrap();
        assert!(matches!(read_clip(dir.path()), Err(Error::MissingFrame { index: 2, .. })));
    }

    #[test]
    fn mask_png_binarises_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(&p).unwrap();
        assert_eq!(read_mask_png(&p).unwrap().data(), &[0, 1]);
    }
}
