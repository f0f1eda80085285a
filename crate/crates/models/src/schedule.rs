//! Linear-β noise schedule, forward noising, deterministic DDIM updates and
//! the nested three-condition guidance combination.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// Cumulative products `ᾱ_t = Π_{s ≤ t} (1 − β_s)`.
    pub alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2 && 0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_t`, with `t < 0` meaning the clean end of the chain (`ᾱ = 1`).
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bars[t as usize]
        }
    }

    /// Uniform-stride timesteps for `n` DDIM steps, descending:
    /// `(t, t_prev)` pairs ending at `t_prev = −1`.
    pub fn ddim_pairs(&self, n: usize) -> Vec<(i64, i64)> {
        let n = n.clamp(1, self.len());
        let stride = self.len() / n;
        let ts: Vec<i64> = (0..n).map(|i| (i * stride) as i64).rev().collect();
        ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(-1))).collect()
    }
}

/// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`, elementwise.
pub fn q_sample(x0: &[f32], t: i64, noise: &[f32], schedule: &NoiseSchedule) -> Vec<f32> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.iter().zip(noise).map(|(&x, &e)| a * x + b * e).collect()
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(z: &[f32], eps: &[f32], t: i64, t_prev: i64, schedule: &NoiseSchedule) -> Vec<f32> {
    if t == t_prev {
        return z.to_vec();
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z.iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let x0 = (z as f64 - sb * e as f64) / sa;
            (pa * x0 + pb * e as f64) as f32
        })
        .collect()
}

/// Guidance scales for the image, mask and flow conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub image: f32,
    pub mask: f32,
    pub flow: f32,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self { image: 5.0, mask: 7.0, flow: 6.0 }
    }
}

impl GuidanceScales {
    pub fn validate(&self) -> Result<()> {
        if [self.image, self.mask, self.flow].iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("guidance scales must be finite and ≥ 0, got {self:?}")))
        }
    }
}

/// `ε̃ = ε_∅∅∅ + s_i(ε_I∅∅ − ε_∅∅∅) + s_m(ε_IM∅ − ε_I∅∅) + s_f(ε_IMF − ε_IM∅)`.
pub fn cfg_combine(uuu: &[f32], iuu: &[f32], imu: &[f32], imf: &[f32], s: GuidanceScales) -> Result<Vec<f32>> {
    let n = uuu.len();
    if iuu.len() != n || imu.len() != n || imf.len() != n {
        return Err(Error::Shape {
            tensor: "guidance inputs".into(),
            detail: format!("lengths {n}, {}, {}, {}", iuu.len(), imu.len(), imf.len()),
        });
    }
    Ok((0..n)
        .map(|i| uuu[i] + s.image * (iuu[i] - uuu[i]) + s.mask * (imu[i] - iuu[i]) + s.flow * (imf[i] - imu[i]))
        .collect())
}
