//! Learned-feature metrics.

use vase_autograd::{Array, Ctx, Graph, ParamStore, Trainable};
use vase_core::{RgbImage, VideoClip};

use crate::data::ref_planes;
use crate::error::{Error, Result};
use crate::unet::AppEncoder;

/// Appearance-encoder embeddings of every frame, resized to the encoder's
/// reference size.
pub fn frame_embeddings(enc: &AppEncoder, store: &ParamStore<f32>, clip: &VideoClip) -> Result<Vec<Vec<f64>>> {
    let r = enc.ref_size;
    let mut planes = Vec::with_capacity(clip.frames() * 3 * r * r);
    for t in 0..clip.frames() {
        let img = RgbImage::new(clip.height(), clip.width(), clip.frame(t).to_vec())?;
        planes.extend(ref_planes(&img, r));
    }
    let g = Graph::<f32>::new();
    let ctx = Ctx::new(&g, store, Trainable::Nothing);
    let e = enc.forward(&ctx, ctx.constant(Array::from_vec(&[clip.frames(), 3, r, r], planes))).value();
    let dim = e.shape()[1];
    Ok(e.data().chunks(dim).map(|row| row.iter().map(|&v| v as f64).collect()).collect())
}

/// Mean cosine similarity of adjacent-frame embeddings, in [−1, 1].
pub fn temporal_feature_consistency(enc: &AppEncoder, store: &ParamStore<f32>, clip: &VideoClip) -> Result<f64> {
    if clip.frames() < 2 {
        return Err(Error::Config("temporal consistency needs at least two frames".into()));
    }
    let e = frame_embeddings(enc, store, clip)?;
    let sims: Vec<f64> = e.windows(2).map(|p| cosine(&p[0], &p[1])).collect();
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
