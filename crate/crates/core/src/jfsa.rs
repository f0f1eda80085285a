//! Joint flow-structure augmentation: motion clustering and the two
//! shape-edit operations (remove a region from the mask, or overwrite the
//! region's flow with the frame-mean flow).

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EditSample, FlowSequence, MaskSequence, RegionSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfsaConfig {
    pub n_clusters_min: usize,
    pub n_clusters_max: usize,
    /// Spatial-bias weight; `None` selects it from the flow statistics.
    pub lambda_bias: Option<f64>,
    pub p_augm: f64,
    pub kmeans: KMeansOptions,
}

impl Default for JfsaConfig {
    fn default() -> Self {
        Self { n_clusters_min: 6, n_clusters_max: 10, lambda_bias: None, p_augm: 0.5, kmeans: KMeansOptions::default() }
    }
}

impl JfsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters_min == 0 || self.n_clusters_min > self.n_clusters_max {
            return Err(Error::InvalidValue(format!(
                "cluster range [{}, {}] is empty",
                self.n_clusters_min, self.n_clusters_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_augm) {
            return Err(Error::InvalidValue(format!("p_augm {} not in [0, 1]", self.p_augm)));
        }
        if let Some(l) = self.lambda_bias {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidValue(format!("lambda_bias {l} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { n_init: 32, max_iter: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub regions: RegionSet,
    pub requested: usize,
    /// Clusters actually produced: `min(requested, distinct features)`
    /// minus any that ended empty.
    pub used: usize,
    /// Per-pixel label (row-major, shared by every frame).
    pub labels: Vec<usize>,
}

/// Default spatial-bias weight: `0.1 · mean |flow| / max(H, W)`.
pub fn auto_lambda(flow: &FlowSequence) -> f64 {
    let n = flow.len() * flow.height() * flow.width();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = flow.data().chunks_exact(2).map(|c| (c[0] as f64).hypot(c[1] as f64)).sum();
    0.1 * (total / n as f64) / flow.height().max(flow.width()) as f64
}

/// Per-pixel features: the flow of every frame pair concatenated, plus
/// `λ·(i, j)` added to each `(u, v)` pair.
pub fn flow_features(flow: &FlowSequence, lambda: f64) -> (Vec<f64>, usize) {
    let (h, w, tn) = (flow.height(), flow.width(), flow.len());
    let dim = 2 * tn;
    let mut feats = vec![0.0; h * w * dim];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for t in 0..tn {
                let (u, v) = flow.at(t, i, j);
                feats[p * dim + 2 * t] = u as f64 + lambda * i as f64;
                feats[p * dim + 2 * t + 1] = v as f64 + lambda * j as f64;
            }
        }
    }
    (feats, dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted Lloyd iterations from the given centroids. Returns
/// `(assignment per point, inertia)`.
pub fn lloyd(points: &[f64], weights: &[f64], dim: usize, centroids: &mut [f64], max_iter: usize) -> (Vec<usize>, f64) {
    let n = weights.len();
    let k = centroids.len() / dim;
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for p in 0..n {
            let x = &points[p * dim..(p + 1) * dim];
            let best = nearest(x, centroids, dim, k).0;
            if assign[p] != best {
                assign[p] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut mass = vec![0.0; k];
        for p in 0..n {
            let c = assign[p];
            mass[c] += weights[p];
            for d in 0..dim {
                sums[c * dim + d] += weights[p] * points[p * dim + d];
            }
        }
        for c in 0..k {
            if mass[c] > 0.0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / mass[c];
                }
            }
        }
    }
    let inertia = (0..n).map(|p| weights[p] * sq_dist(&points[p * dim..(p + 1) * dim], &centroids[assign[p] * dim..(assign[p] + 1) * dim])).sum();
    (assign, inertia)
}

/// Index and squared distance of the nearest centroid (lowest index on ties).
fn nearest(x: &[f64], centroids: &[f64], dim: usize, k: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let d = sq_dist(x, &centroids[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn weighted_pick(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            if r < x {
                return i;
            }
            r -= x;
        }
    }
    // floating-point slack: last positive entry
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

fn kmeans_pp_init(points: &[f64], weights: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = weights.len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = weighted_pick(rng, weights);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n).map(|p| sq_dist(&points[p * dim..(p + 1) * dim], &centroids[..dim])).collect();
    for c in 1..k {
        let probs: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let pick = weighted_pick(rng, &probs);
        centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        let new_c = &centroids[c * dim..(c + 1) * dim];
        for p in 0..n {
            let d = sq_dist(&points[p * dim..(p + 1) * dim], new_c);
            if d < d2[p] {
                d2[p] = d;
            }
        }
    }
    centroids
}

/// Collapse identical feature vectors into weighted unique points (in
/// first-occurrence order). Returns `(points, weights, point index per row)`.
pub fn dedup_features(feats: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let rows = feats.len() / dim.max(1);
    let mut owner = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &feats[r * dim..(r + 1) * dim];
        // +0.0 and -0.0 are the same feature
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        let id = *index.entry(key).or_insert_with(|| {
            points.extend_from_slice(row);
            weights.push(0.0);
            weights.len() - 1
        });
        weights[id] += 1.0;
        owner.push(id);
    }
    (points, weights, owner)
}

/// Weighted k-means with k-means++ seeding and restarts. Returns the label
/// of every unique point and the inertia of the best restart.
pub fn kmeans(points: &[f64], weights: &[f64], dim: usize, k: usize, opts: KMeansOptions, seed: u64) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..opts.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r as u64));
        let mut centroids = kmeans_pp_init(points, weights, dim, k, &mut rng);
        let (assign, inertia) = lloyd(points, weights, dim, &mut centroids, opts.max_iter);
        if best.as_ref().map_or(true, |b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    best.expect("at least one restart")
}

/// Partition every pixel into motion-consistent regions.
pub fn cluster_flow(flow: &FlowSequence, n_c: usize, lambda: f64, opts: KMeansOptions, seed: u64) -> Result<Clustering> {
    if n_c == 0 {
        return Err(Error::InvalidValue("number of clusters must be ≥ 1".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidValue(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    let (h, w) = (flow.height(), flow.width());
    let (feats, dim) = flow_features(flow, lambda);
    let (points, weights, owner) = dedup_features(&feats, dim);
    let k = n_c.min(weights.len());
    let (assign, _) = kmeans(&points, &weights, dim, k, opts, seed);

    // canonical labels: clusters numbered by first pixel in row-major order
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    let mut labels = Vec::with_capacity(h * w);
    for &o in &owner {
        let c = assign[o];
        if relabel[c] == usize::MAX {
            relabel[c] = next;
            next += 1;
        }
        labels.push(relabel[c]);
    }
    let frames = flow.len() + 1;
    let regions = (0..next)
        .map(|c| {
            let one: Vec<u8> = labels.iter().map(|&l| u8::from(l == c)).collect();
            MaskSequence::new(frames, h, w, one.repeat(frames)).expect("region dims")
        })
        .collect();
    Ok(Clustering { regions: RegionSet { regions }, requested: n_c, used: next, labels })
}

fn check_aug_dims(flow: &FlowSequence, masks: &MaskSequence, region: &MaskSequence) -> Result<()> {
    masks.same_dims(region)?;
    flow.check_pairs_with(masks.frames(), masks.height(), masks.width())
}

/// Remove `region` from the object: flow untouched, `M ⊙ (1 − E)`.
pub fn augment_remove(flow: &FlowSequence, masks: &MaskSequence, region: &MaskSequence) -> Result<(FlowSequence, MaskSequence)> {
    check_aug_dims(flow, masks, region)?;
    Ok((flow.clone(), masks.minus(region)))
}

/// Add `region` to the object: its flow becomes the per-frame, per-channel
/// mean of the whole field; masks untouched.
pub fn augment_add(flow: &FlowSequence, masks: &MaskSequence, region: &MaskSequence) -> Result<(FlowSequence, MaskSequence)> {
    check_aug_dims(flow, masks, region)?;
    let mut out = flow.clone();
    let n = flow.height() * flow.width();
    for t in 0..flow.len() {
        let field = flow.field_slice(t);
        let (mut su, mut sv) = (0.0f64, 0.0f64);
        for c in field.chunks_exact(2) {
            su += c[0] as f64;
            sv += c[1] as f64;
        }
        let mean = ((su / n as f64) as f32, (sv / n as f64) as f32);
        let reg = region.frame_slice(t);
        for (p, c) in out.field_slice_mut(t).chunks_exact_mut(2).enumerate() {
            if reg[p] == 1 {
                c[0] = mean.0;
                c[1] = mean.1;
            }
        }
    }
    Ok((out, masks.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    Remove,
    Add,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub kind: AugKind,
    pub region: MaskSequence,
    pub n_clusters: usize,
}

/// Apply one random augmentation with probability `p_augm`.
pub fn sample_augmentation(sample: &EditSample, cfg: &JfsaConfig, rng: &mut impl Rng) -> Result<(EditSample, Option<Augmentation>)> {
    if !rng.gen_bool(cfg.p_augm) {
        return Ok((sample.clone(), None));
    }
    let n_c = rng.gen_range(cfg.n_clusters_min..=cfg.n_clusters_max);
    let kind = if rng.gen_bool(0.5) { AugKind::Remove } else { AugKind::Add };
    let lambda = cfg.lambda_bias.unwrap_or_else(|| auto_lambda(&sample.flow));
    let clustering = cluster_flow(&sample.flow, n_c, lambda, cfg.kmeans, rng.gen())?;
    let regions = &clustering.regions.regions;
    let mut pick = rng.gen_range(0..regions.len());
    if kind == AugKind::Remove && regions[pick].and(&sample.target_masks).count() == 0 {
        pick = rng.gen_range(0..regions.len());
    }
    let region = regions[pick].clone();
    let (flow, masks) = match kind {
        AugKind::Remove => augment_remove(&sample.flow, &sample.target_masks, &region)?,
        AugKind::Add => augment_add(&sample.flow, &sample.target_masks, &region)?,
    };
    let mut out = sample.clone();
    out.structure_mask = masks.frame(0);
    out.flow = flow;
    out.target_masks = masks;
    Ok((out, Some(Augmentation { kind, region, n_clusters: clustering.used })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Mask;

    fn halves() -> FlowSequence {
        let mut f = FlowSequence::zeros(1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                f.set(0, y, x, if x < 2 { (1.0, 0.0) } else { (-1.0, 0.0) });
            }
        }
        f
    }

    #[test]
    fn zero_flow_single_cluster_is_whole_frame() {
        let c = cluster_flow(&FlowSequence::zeros(2, 3, 5), 1, 0.0, KMeansOptions::default(), 0).unwrap();
        assert_eq!(c.used, 1);
        assert!(c.regions.regions[0].data().iter().all(|&v| v == 1));
    }

    #[test]
    fn two_motions_split_into_halves() {
        let c = cluster_flow(&halves(), 2, 0.0, KMeansOptions::default(), 3).unwrap();
        assert_eq!(c.used, 2);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(c.labels[y * 4 + x], usize::from(x >= 2));
            }
        }
        assert!(c.regions.is_partition());
    }

    #[test]
    fn requested_clusters_reduced_to_distinct_count() {
        let c = cluster_flow(&halves(), 7, 0.0, KMeansOptions::default(), 0).unwrap();
        assert_eq!(c.requested, 7);
        assert_eq!(c.used, 2);
    }

    #[test]
    fn add_replaces_region_with_frame_mean() {
        let f = FlowSequence::new(1, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0]).unwrap();
        let masks = MaskSequence::zeros(2, 2, 2);
        let region = MaskSequence::repeat(&Mask::from_points(2, 2, &[(0, 0)]), 2);
        let (g, m) = augment_add(&f, &masks, &region).unwrap();
        assert_eq!(g.at(0, 0, 0), (1.0, 0.0));
        assert_eq!(g.at(0, 1, 0), (2.0, 0.0));
        assert_eq!(m, masks);
    }

    #[test]
    fn remove_masks_out_region() {
        let f = halves();
        let masks = MaskSequence::repeat(&Mask::ones(4, 4), 2);
        let region = MaskSequence::repeat(&Mask::from_points(4, 4, &[(1, 1)]), 2);
        let (g, m) = augment_remove(&f, &masks, &region).unwrap();
        assert_eq!(g, f);
        assert_eq!(m.count(), 2 * 15);
        assert_eq!(m.frame(1).get(1, 1), 0);
    }

    #[test]
    fn p_augm_zero_is_identity() {
        let (_, gv) = crate::synth::generate_random(&Default::default(), 1).unwrap();
        let s = crate::synth::make_sample(&gv, 0).unwrap();
        let cfg = JfsaConfig { p_augm: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (o, a) = sample_augmentation(&s, &cfg, &mut rng).unwrap();
            assert!(a.is_none());
            assert_eq!(o, s);
        }
    }

    #[test]
    fn config_validation() {
        assert!(JfsaConfig::default().validate().is_ok());
        assert!(JfsaConfig { n_clusters_min: 11, ..Default::default() }.validate().is_err());
        assert!(JfsaConfig { p_augm: 1.5, ..Default::default() }.validate().is_err());
    }
}
