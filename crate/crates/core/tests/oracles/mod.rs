//! Independent reference implementations used by property and acceptance
//! tests. Deliberately naive: exhaustive search, O(N²) scans.

#![allow(dead_code)]

use vase_core::{FlowSequence, Mask, MaskSequence};

/// Exact k-means over a handful of weighted points: Lloyd from every
/// k-subset of the points as initial centroids, keep the lowest inertia.
/// Returns a label per point.
pub fn brute_force_kmeans(points: &[Vec<f64>], weights: &[f64], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for subset in k_subsets(n, k) {
        let mut cents: Vec<Vec<f64>> = subset.iter().map(|&i| points[i].clone()).collect();
        let mut labels = vec![usize::MAX; n];
        loop {
            let new: Vec<usize> = points
                .iter()
                .map(|p| {
                    let d: Vec<f64> = cents.iter().map(|c| dist2(p, c)).collect();
                    let mut b = 0;
                    for j in 1..d.len() {
                        if d[j] < d[b] {
                            b = j;
                        }
                    }
                    b
                })
                .collect();
            if new == labels {
                break;
            }
            labels = new;
            for (j, c) in cents.iter_mut().enumerate() {
                let m: f64 = (0..n).filter(|&i| labels[i] == j).map(|i| weights[i]).sum();
                if m > 0.0 {
                    for d in 0..c.len() {
                        c[d] = (0..n).filter(|&i| labels[i] == j).map(|i| weights[i] * points[i][d]).sum::<f64>() / m;
                    }
                }
            }
        }
        let inertia: f64 = (0..n).map(|i| weights[i] * dist2(&points[i], &cents[labels[i]])).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b - 1e-9) {
            best = Some((inertia, labels));
        }
    }
    best.expect("k ≤ n").1
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// True if the two labelings induce the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *ab.entry(x).or_insert(y) != y || *ba.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// O(N²) nearest-known infill (Euclidean, row-major first on ties).
pub fn brute_force_infill(flow: &FlowSequence, known: &MaskSequence, missing: &MaskSequence) -> FlowSequence {
    let (h, w) = (flow.height(), flow.width());
    let mut out = flow.clone();
    for t in 0..flow.len() {
        let k = known.frame(t);
        let m = missing.frame(t);
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) == 0 {
                    continue;
                }
                let mut best: Option<(usize, (usize, usize))> = None;
                for yy in 0..h {
                    for xx in 0..w {
                        if k.get(yy, xx) == 1 {
                            let d = y.abs_diff(yy).pow(2) + x.abs_diff(xx).pow(2);
                            if best.map_or(true, |(bd, _)| d < bd) {
                                best = Some((d, (yy, xx)));
                            }
                        }
                    }
                }
                let (_, (yy, xx)) = best.expect("known non-empty");
                out.set(t, y, x, flow.at(t, yy, xx));
            }
        }
    }
    out
}

/// Per-target gather formulation of bilinear splatting: every target pixel
/// sums `value · tent(dx) · tent(dy)` over all sources.
pub fn gather_splat(mask: &Mask, field: &[f32]) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; h * w];
    for qy in 0..h {
        for qx in 0..w {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == 0 {
                        continue;
                    }
                    let p = y * w + x;
                    let tx = x as f64 + field[2 * p] as f64;
                    let ty = y as f64 + field[2 * p + 1] as f64;
                    s += tent(tx - qx as f64) * tent(ty - qy as f64);
                }
            }
            out[qy * w + qx] = s;
        }
    }
    out
}
