//! On-disk layout of an edit result:
//!
//! ```text
//! <dir>/source/      input frames (PNG)
//! <dir>/frames/      edited frames (PNG)
//! <dir>/pred_masks/  predicted object masks
//! <dir>/structure/   propagated target shape
//! <dir>/bbox/        editable region
//! <dir>/flow/        completed flow (.flo)
//! <dir>/edit.json    run metadata
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vase_core::io;
use vase_core::{FlowSequence, MaskSequence, VideoClip};
use vase_models::sampler::{concat_chained, EditOutput};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditMeta {
    pub source: Option<String>,
    pub runtime_s: f64,
    pub seed: u64,
    pub scales: [f32; 3],
    /// Number of chained batches the video was edited in.
    pub batches: usize,
}

/// An edited video with its per-frame side outputs, possibly joined from
/// chained batches.
#[derive(Clone, Debug)]
pub struct EditedVideo {
    pub video: VideoClip,
    pub pred_masks: MaskSequence,
    pub structure: MaskSequence,
    pub bbox: MaskSequence,
    pub flow: FlowSequence,
}

/// Join chained batches; the shared seam frame appears once.
pub fn join(parts: &[EditOutput]) -> Result<EditedVideo> {
    let video = concat_chained(parts)?;
    let masks = |get: fn(&EditOutput) -> &MaskSequence| -> Result<MaskSequence> {
        let mut frames = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            let m = get(p);
            frames.extend((usize::from(i > 0)..m.frames()).map(|t| m.frame(t)));
        }
        Ok(MaskSequence::from_masks(&frames)?)
    };
    let mut fields = Vec::new();
    for p in parts {
        fields.extend((0..p.completed_flow.len()).map(|t| p.completed_flow.field(t)));
    }
    Ok(EditedVideo {
        video,
        pred_masks: masks(|p| &p.pred_masks)?,
        structure: masks(|p| &p.plan.structure)?,
        bbox: masks(|p| &p.plan.bbox)?,
        flow: FlowSequence::from_fields(&fields)?,
    })
}

pub fn write_edit(dir: &Path, source: &VideoClip, edit: &EditedVideo, meta: &EditMeta) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    io::write_clip(&dir.join("source"), source)?;
    io::write_clip(&dir.join("frames"), &edit.video)?;
    io::write_masks(&dir.join("pred_masks"), &edit.pred_masks)?;
    io::write_masks(&dir.join("structure"), &edit.structure)?;
    io::write_masks(&dir.join("bbox"), &edit.bbox)?;
    io::write_flow_dir(&dir.join("flow"), &edit.flow)?;
    let path = dir.join("edit.json");
    fs::write(&path, serde_json::to_string_pretty(meta)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// An edit result read back from disk.
#[derive(Clone, Debug)]
pub struct StoredEdit {
    pub id: String,
    pub source: VideoClip,
    pub edit: EditedVideo,
    pub meta: EditMeta,
}

pub fn read_edit(dir: &Path) -> Result<StoredEdit> {
    let ctx = || format!("reading edit result {}", dir.display());
    let meta_path = dir.join("edit.json");
    let meta: EditMeta = serde_json::from_str(&fs::read_to_string(&meta_path).with_context(ctx)?).with_context(ctx)?;
    let edit = EditedVideo {
        video: io::read_clip(&dir.join("frames")).with_context(ctx)?,
        pred_masks: io::read_masks(&dir.join("pred_masks")).with_context(ctx)?,
        structure: io::read_masks(&dir.join("structure")).with_context(ctx)?,
        bbox: io::read_masks(&dir.join("bbox")).with_context(ctx)?,
        flow: io::read_flow_dir(&dir.join("flow")).with_context(ctx)?,
    };
    Ok(StoredEdit { id: dir_name(dir), source: io::read_clip(&dir.join("source")).with_context(ctx)?, edit, meta })
}

pub fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

/// Edit directories named on the command line: each argument is either an
/// edit result itself or a directory whose children are edit results.
pub fn expand_edit_dirs(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for a in args {
        if a.join("edit.json").is_file() {
            out.push(a.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(a)
            .with_context(|| format!("listing {}", a.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("edit.json").is_file())
            .collect();
        if children.is_empty() {
            anyhow::bail!("{} contains no edit results", a.display());
        }
        children.sort();
        out.extend(children);
    }
    Ok(out)
}
