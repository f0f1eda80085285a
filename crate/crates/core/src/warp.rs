//! Forward warping by summation splatting and nearest-neighbour flow infill.

use crate::error::{Error, Result};
use crate::types::{FlowSequence, Mask, MaskSequence};

/// Scatter each source value to the four integer neighbours of its displaced
/// position with bilinear weights. Out-of-bounds contributions are dropped.
pub fn splat_values(values: &[f64], height: usize, width: usize, field: &[f32]) -> Vec<f64> {
    assert_eq!(values.len(), height * width, "splat values dims");
    assert_eq!(field.len(), height * width * 2, "splat field dims");
    let mut out = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let val = values[p];
            if val == 0.0 {
                continue;
            }
            let tx = x as f64 + field[p * 2] as f64;
            let ty = y as f64 + field[p * 2 + 1] as f64;
            let (x0, y0) = (tx.floor(), ty.floor());
            let (fx, fy) = (tx - x0, ty - y0);
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let (xx, yy) = (x0 + dx, y0 + dy);
                    let wgt = wx * wy;
                    if wgt == 0.0 || xx < 0.0 || yy < 0.0 || xx >= width as f64 || yy >= height as f64 {
                        continue;
                    }
                    out[yy as usize * width + xx as usize] += val * wgt;
                }
            }
        }
    }
    out
}

/// Summation splatting of a binary mask by one flow field.
pub fn splat_sum(mask: &Mask, field: &[f32]) -> Vec<f64> {
    let values: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    splat_values(&values, mask.height, mask.width, field)
}

pub fn binarize(values: &[f64], height: usize, width: usize, threshold: f64) -> Mask {
    Mask::new(height, width, values.iter().map(|&v| u8::from(v >= threshold)).collect()).expect("binary dims")
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Repeatedly splat `region0` along the flow, re-binarising every step.
pub fn warp_region_sequence(region0: &Mask, flow: &FlowSequence, threshold: f64) -> Result<MaskSequence> {
    if (region0.height, region0.width) != (flow.height(), flow.width()) {
        return Err(Error::DimMismatch("region and flow sizes differ".into()));
    }
    let mut masks = vec![region0.clone()];
    for t in 0..flow.len() {
        let prev = masks.last().expect("non-empty");
        let next = binarize(&splat_sum(prev, flow.field_slice(t)), flow.height(), flow.width(), threshold);
        masks.push(next);
    }
    MaskSequence::from_masks(&masks)
}

/// Copy, into every `missing` pixel of field `t`, the flow of the
/// Euclidean-nearest `known` pixel (ties: first in row-major order).
pub fn infill_field(field: &mut [f32], known: &Mask, missing: &Mask, frame: usize) -> Result<()> {
    let (h, w) = (known.height, known.width);
    if missing.is_empty() {
        return Ok(());
    }
    if known.is_empty() {
        return Err(Error::NoKnownPixels(frame));
    }
    let src = field.to_vec();
    let max_r = h.max(w) as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if missing.get(y as usize, x as usize) == 0 {
                continue;
            }
            let mut best: Option<(i64, usize)> = None;
            // Chebyshev rings: every pixel of ring r is at Euclidean distance ≥ r
            for r in 0..=max_r {
                if let Some((d2, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                let mut visit = |yy: i64, xx: i64| {
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || known.get(yy as usize, xx as usize) == 0 {
                        return;
                    }
                    let d2 = (yy - y).pow(2) + (xx - x).pow(2);
                    let idx = yy as usize * w + xx as usize;
                    if best.map_or(true, |(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                        best = Some((d2, idx));
                    }
                };
                if r == 0 {
                    visit(y, x);
                    continue;
                }
                for xx in x - r..=x + r {
                    visit(y - r, xx);
                    visit(y + r, xx);
                }
                for yy in y - r + 1..y + r {
                    visit(yy, x - r);
                    visit(yy, x + r);
                }
            }
            let (_, idx) = best.expect("known is non-empty");
            let p = y as usize * w + x as usize;
            field[p * 2] = src[idx * 2];
            field[p * 2 + 1] = src[idx * 2 + 1];
        }
    }
    Ok(())
}

/// Nearest-known-pixel flow infill for every field of the sequence. Mask
/// sequences may have one more frame than the flow; the extra one is unused.
pub fn infill_flow_nn(flow: &FlowSequence, known: &MaskSequence, missing: &MaskSequence) -> Result<FlowSequence> {
    known.same_dims(missing)?;
    if known.frames() < flow.len() || (known.height(), known.width()) != (flow.height(), flow.width()) {
        return Err(Error::DimMismatch("infill masks do not cover the flow".into()));
    }
    let mut out = flow.clone();
    for t in 0..flow.len() {
        let (k, m) = (known.frame(t), missing.frame(t));
        if !k.and(&m).is_empty() {
            return Err(Error::InvalidValue(format!("known and missing overlap at frame {t}")));
        }
        infill_field(out.field_slice_mut(t), &k, &m, t)?;
    }
    Ok(out)
}

/// Propagate a region added to the object: at each step the warped region's
/// pixels outside the object take the flow of the nearest object pixel, then
/// the region is splatted forward with that completed flow.
///
/// Returns the warped region sequence and the infilled flow.
pub fn warp_added_region(region0: &Mask, flow: &FlowSequence, object: &MaskSequence, threshold: f64) -> Result<(MaskSequence, FlowSequence)> {
    flow.check_pairs_with(object.frames(), object.height(), object.width())?;
    region0.same_dims(&object.frame(0))?;
    let mut filled = flow.clone();
    let mut masks = vec![region0.clone()];
    for t in 0..flow.len() {
        let cur = masks.last().expect("non-empty").clone();
        let obj = object.frame(t);
        let missing = cur.minus(&obj);
        infill_field(filled.field_slice_mut(t), &obj, &missing, t)?;
        let next = binarize(&splat_sum(&cur, filled.field_slice(t)), flow.height(), flow.width(), threshold);
        masks.push(next);
    }
    Ok((MaskSequence::from_masks(&masks)?, filled))
}
