//! Per-video metric rows, the CSV report and side-by-side frame strips.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vase_autograd::ParamStore;
use vase_core::io::{self, read_masks};
use vase_core::metrics::{miou, warping_error};
use vase_core::{MaskSequence, VideoClip};
use vase_models::eval::temporal_feature_consistency;
use vase_models::unet::AppEncoder;

use crate::output::{dir_name, StoredEdit};

/// Columns of the reference benchmarks that need external pretrained models.
pub const OUT_OF_SCOPE: [&str; 5] = ["fvd", "clip_s", "clip_t", "dover", "lpips"];
const NA: &str = "n/a (out of scope)";

pub const CSV_HEADER: &str = "video_id,we,miou_frame0,tfc,runtime_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub video_id: String,
    pub we: Option<f64>,
    pub miou_frame0: f64,
    pub tfc: Option<f64>,
    pub runtime_s: Option<f64>,
}

/// Appearance encoder and its weights, for the temporal consistency proxy.
pub struct FeatureModel<'a> {
    pub encoder: &'a AppEncoder,
    pub store: &'a ParamStore<f32>,
}

/// Metrics of one stored edit: warping error inside the editable region,
/// first-frame mIoU of the predicted object against the requested shape.
pub fn edit_row(e: &StoredEdit, features: Option<&FeatureModel>) -> Result<MetricRow> {
    let ed = &e.edit;
    let tfc = match features {
        Some(f) => Some(temporal_feature_consistency(f.encoder, f.store, &ed.video)?),
        None => None,
    };
    Ok(MetricRow {
        video_id: e.id.clone(),
        we: Some(warping_error(&ed.video, &ed.flow, Some(&ed.bbox))?),
        miou_frame0: miou(&ed.pred_masks.frame(0), &ed.structure.frame(0))?,
        tfc,
        runtime_s: Some(e.meta.runtime_s),
    })
}

/// Mask videos under `dir`: a directory of PNGs is one video, otherwise
/// every subdirectory is one.
pub fn mask_videos(dir: &Path) -> Result<Vec<(String, MaskSequence)>> {
    let entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    if entries.iter().any(|p| p.extension().is_some_and(|x| x == "png")) {
        return Ok(vec![(dir_name(dir), read_masks(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = entries.into_iter().filter(|p| p.is_dir()).collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("{} contains no mask frames", dir.display());
    }
    subdirs.iter().map(|d| Ok((dir_name(d), read_masks(d)?))).collect()
}

/// Compare predicted against target mask videos matched by name.
pub fn mask_rows(pred: &Path, target: &Path) -> Result<Vec<MetricRow>> {
    let preds = mask_videos(pred)?;
    let targets = mask_videos(target)?;
    if preds.len() != targets.len() {
        bail!("{} has {} videos but {} has {}", pred.display(), preds.len(), target.display(), targets.len());
    }
    preds
        .iter()
        .zip(&targets)
        .map(|((id, p), (tid, t))| {
            if preds.len() > 1 && id != tid {
                bail!("video {id} has no counterpart (found {tid})");
            }
            Ok(MetricRow { video_id: id.clone(), we: None, miou_frame0: miou(&p.frame(0), &t.frame(0))?, tfc: None, runtime_s: None })
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

pub fn render_csv(rows: &[MetricRow], out_of_scope: bool) -> String {
    let mut s = String::from(CSV_HEADER);
    if out_of_scope {
        for c in OUT_OF_SCOPE {
            s.push(',');
            s.push_str(c);
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{:.6},{},{}", r.video_id, cell(r.we), r.miou_frame0, cell(r.tfc), cell(r.runtime_s));
        if out_of_scope {
            for _ in OUT_OF_SCOPE {
                s.push(',');
                s.push_str(NA);
            }
        }
        s.push('\n');
    }
    s
}

/// Means of the numeric columns over rows that have them.
pub fn summary(rows: &[MetricRow]) -> String {
    let mean = |f: &dyn Fn(&MetricRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    format!(
        "videos {}  we {}  miou_frame0 {}  tfc {}  runtime_s {}",
        rows.len(),
        cell(mean(&|r| r.we)),
        cell(mean(&|r| Some(r.miou_frame0))),
        cell(mean(&|r| r.tfc)),
        cell(mean(&|r| r.runtime_s))
    )
}

/// Rows: source frames, edited frames, edited frames with the predicted
/// object tinted and the editable box outlined. One column per frame.
pub fn frame_strip(source: &VideoClip, edit: &crate::output::EditedVideo) -> (usize, usize, Vec<f32>) {
    let (t, h, w) = (edit.video.frames(), edit.video.height(), edit.video.width());
    let gap = 2;
    let (sw, sh) = (t * w + (t - 1) * gap, 3 * h + 2 * gap);
    let mut img = vec![1.0f32; sw * sh * 3];
    let mut put = |row: usize, f: usize, y: usize, x: usize, px: [f32; 3]| {
        let (yy, xx) = (row * (h + gap) + y, f * (w + gap) + x);
        img[(yy * sw + xx) * 3..(yy * sw + xx) * 3 + 3].copy_from_slice(&px);
    };
    for f in 0..t {
        let pred = edit.pred_masks.frame_slice(f);
        let bbox = edit.bbox.frame_slice(f);
        for y in 0..h {
            for x in 0..w {
                let q = y * w + x;
                if f < source.frames() {
                    put(0, f, y, x, source.pixel(f, y, x));
                }
                let px = edit.video.pixel(f, y, x);
                put(1, f, y, x, px);
                let edge = bbox[q] == 1 && (y == 0 || x == 0 || y + 1 == h || x + 1 == w || bbox[q - w] == 0 || bbox[q + w] == 0 || bbox[q - 1] == 0 || bbox[q + 1] == 0);
                let tinted = if edge {
                    [1.0, 1.0, 0.0]
                } else if pred[q] == 1 {
                    [0.5 * px[0] + 0.5, 0.5 * px[1], 0.5 * px[2]]
                } else {
                    px
                };
                put(2, f, y, x, tinted);
            }
        }
    }
    (sh, sw, img)
}

pub fn write_strip(path: &Path, e: &StoredEdit) -> Result<()> {
    let (h, w, data) = frame_strip(&e.source, &e.edit);
    io::write_rgb_png(path, h, w, &data)?;
    Ok(())
}
