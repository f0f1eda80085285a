//! Temporal-consistency and segmentation metrics.

use crate::error::Result;
use crate::types::{FlowSequence, Mask, MaskSequence, VideoClip};

/// Bilinear sample of one frame at a sub-pixel position; `None` outside the
/// pixel-centre hull.
pub fn sample_bilinear(clip: &VideoClip, t: usize, x: f64, y: f64) -> Option<[f64; 3]> {
    let (h, w) = (clip.height(), clip.width());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            let p = clip.pixel(t, yy, xx);
            for c in 0..3 {
                out[c] += wx * wy * p[c] as f64;
            }
        }
    }
    Some(out)
}

/// Mean absolute difference between frame `t` and frame `t + 1` sampled back
/// along the forward flow, over the region pixels of frame `t` (all pixels
/// when `region` is `None`). Samples landing outside the frame are skipped.
pub fn warping_error(clip: &VideoClip, flow: &FlowSequence, region: Option<&MaskSequence>) -> Result<f64> {
    flow.check_pairs_with(clip.frames(), clip.height(), clip.width())?;
    if let Some(r) = region {
        if (r.height(), r.width()) != (clip.height(), clip.width()) || r.frames() < flow.len() {
            return Err(crate::error::Error::DimMismatch("warping-error region".into()));
        }
    }
    let (h, w) = (clip.height(), clip.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..flow.len() {
        let reg = region.map(|r| r.frame_slice(t));
        for y in 0..h {
            for x in 0..w {
                if reg.is_some_and(|r| r[y * w + x] == 0) {
                    continue;
                }
                let (u, v) = flow.at(t, y, x);
                let Some(s) = sample_bilinear(clip, t + 1, x as f64 + u as f64, y as f64 + v as f64) else { continue };
                let p = clip.pixel(t, y, x);
                total += (0..3).map(|c| (s[c] - p[c] as f64).abs()).sum::<f64>() / 3.0;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn iou(a: &[u8], b: &[u8], class: u8) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (px, py) = (x == class, y == class);
        inter += usize::from(px && py);
        union += usize::from(px || py);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the foreground class alone (1 when both are empty).
pub fn foreground_iou(pred: &Mask, target: &Mask) -> f64 {
    iou(pred.data(), target.data(), 1)
}

/// Mean of foreground and background IoU.
pub fn miou(pred: &Mask, target: &Mask) -> Result<f64> {
    pred.same_dims(target)?;
    Ok(0.5 * (iou(pred.data(), target.data(), 1) + iou(pred.data(), target.data(), 0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_identity_and_complement() {
        let m = Mask::from_points(4, 4, &[(0, 0), (1, 1), (2, 3)]);
        assert_eq!(miou(&m, &m).unwrap(), 1.0);
        assert_eq!(miou(&m.complement(), &m).unwrap(), 0.0);
        assert_eq!(miou(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn half_overlapping_squares() {
        // two 2x2 squares sharing one column: overlap 2, union 6
        let a = Mask::from_points(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = Mask::from_points(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        assert!((foreground_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn static_clip_zero_error() {
        let frame: Vec<f32> = (0..48).map(|i| (i % 7) as f32 / 7.0).collect();
        let clip = VideoClip::new(3, 4, 4, frame.repeat(3)).unwrap();
        let we = warping_error(&clip, &FlowSequence::zeros(2, 4, 4), None).unwrap();
        assert_eq!(we, 0.0);
    }
}
