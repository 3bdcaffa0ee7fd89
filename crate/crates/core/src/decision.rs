//! Activation decisions from posterior draws: standardized magnitudes, the
//! risk-minimizing threshold rule and count-matched thresholds.

use log::warn;

use crate::error::{Error, Result};
use crate::hmc::PosteriorDraws;

/// Penalties of the activation loss: `k1` per missed activation, `k2` per
/// false activation, `t` per reported voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionParams {
    pub k1: f64,
    pub k2: f64,
    pub t: f64,
}

impl DecisionParams {
    pub fn new(k1: f64, k2: f64, t: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k2 >= 0.0 && t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "decision penalties must be non-negative, got k1={k1}, k2={k2}, t={t}"
            )));
        }
        let p = Self { k1, k2, t };
        let th = p.threshold();
        if !(0.0..=1.0).contains(&th) {
            warn!("decision threshold {th} lies outside [0, 1]");
        }
        Ok(p)
    }

    /// `(1 + k2 + t) / (2 + k1 + k2)`.
    pub fn threshold(&self) -> f64 {
        (1.0 + self.k2 + self.t) / (2.0 + self.k1 + self.k2)
    }
}

/// How `E{f(m_i)}` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reading {
    /// Average `m_i / max_j m_j` over draws.
    #[default]
    MonteCarlo,
    /// Apply `f` once to magnitudes built from the posterior mean.
    PlugIn,
}

/// Per-voxel posterior summaries feeding the decision rule.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// `|mean| / sd`.
    pub m: Vec<f64>,
    pub f_bar: Vec<f64>,
    /// Voxels with zero posterior sd, where `f_bar` is set to 0.
    pub undefined: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSummary {
    pub m: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub delta: Vec<bool>,
    pub threshold: f64,
}

impl ActivationSummary {
    pub fn n_discoveries(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }
}

/// Statistics over a row-major `draws x n_voxels` matrix.
pub fn posterior_m_matrix(mu: &[f64], n_voxels: usize, reading: Reading) -> Result<VoxelStats> {
    if n_voxels == 0 || mu.len() % n_voxels != 0 {
        return Err(Error::DimensionMismatch(format!(
            "draw matrix of length {} is not a multiple of {n_voxels} voxels",
            mu.len()
        )));
    }
    let g_count = mu.len() / n_voxels;
    if g_count < 2 {
        return Err(Error::InvalidArgument("at least two draws are needed".into()));
    }
    let gf = g_count as f64;
    let mut mean = vec![0.0; n_voxels];
    for row in mu.chunks_exact(n_voxels) {
        for (a, &x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= gf);
    let mut ss = vec![0.0; n_voxels];
    for row in mu.chunks_exact(n_voxels) {
        for ((a, &x), &m) in ss.iter_mut().zip(row).zip(&mean) {
            *a += (x - m) * (x - m);
        }
    }
    let sd: Vec<f64> = ss.iter().map(|s| (s / (gf - 1.0)).sqrt()).collect();
    let undefined: Vec<usize> = (0..n_voxels).filter(|&i| !(sd[i] > 0.0)).collect();
    if !undefined.is_empty() {
        warn!("{} voxels have zero posterior sd; their f_bar is set to 0", undefined.len());
    }
    let inv_sd: Vec<f64> = sd.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect();
    let m: Vec<f64> = mean.iter().zip(&inv_sd).map(|(a, b)| a.abs() * b).collect();

    let f_bar = match reading {
        Reading::PlugIn => {
            let mx = m.iter().copied().fold(0.0, f64::max);
            if mx > 0.0 {
                m.iter().map(|v| v / mx).collect()
            } else {
                vec![0.0; n_voxels]
            }
        }
        Reading::MonteCarlo => {
            let mut acc = vec![0.0; n_voxels];
            let mut mg = vec![0.0; n_voxels];
            for row in mu.chunks_exact(n_voxels) {
                let mut mx: f64 = 0.0;
                for ((o, &x), &w) in mg.iter_mut().zip(row).zip(&inv_sd) {
                    *o = x.abs() * w;
                    mx = mx.max(*o);
                }
                if mx > 0.0 {
                    for (a, &o) in acc.iter_mut().zip(&mg) {
                        *a += o / mx;
                    }
                }
            }
            acc.iter().map(|a| a / gf).collect()
        }
    };
    Ok(VoxelStats {
        mean,
        sd,
        m,
        f_bar,
        undefined,
    })
}

/// Statistics over draws pooled across chains.
pub fn posterior_m(chains: &[PosteriorDraws], reading: Reading) -> Result<VoxelStats> {
    let n_voxels = chains
        .first()
        .ok_or_else(|| Error::InvalidArgument("no chains supplied".into()))?
        .n_voxels;
    if chains.iter().any(|c| c.n_voxels != n_voxels) {
        return Err(Error::DimensionMismatch("chains disagree on voxel count".into()));
    }
    if chains.len() == 1 {
        return posterior_m_matrix(&chains[0].mu, n_voxels, reading);
    }
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.mu.iter().copied()).collect();
    posterior_m_matrix(&pooled, n_voxels, reading)
}

/// `delta_i = f_bar_i >= threshold` with the loss-optimal threshold.
pub fn decide(stats: &VoxelStats, params: &DecisionParams) -> ActivationSummary {
    decide_at(stats, params.threshold())
}

/// `delta_i = f_bar_i >= threshold`.
pub fn decide_at(stats: &VoxelStats, threshold: f64) -> ActivationSummary {
    ActivationSummary {
        m: stats.m.clone(),
        f_bar: stats.f_bar.clone(),
        delta: stats.f_bar.iter().map(|&f| f >= threshold).collect(),
        threshold,
    }
}

/// Smallest threshold yielding exactly `n` discoveries, with the achieved
/// count. When ties at the boundary make `n` unattainable, all tied voxels are
/// included and the achieved count exceeds `n`.
pub fn threshold_for_count(f_bar: &[f64], n: usize) -> Result<(f64, usize)> {
    if n > f_bar.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {n} discoveries among {} voxels",
            f_bar.len()
        )));
    }
    if n == f_bar.len() {
        return Ok((0.0, n));
    }
    let mut sorted = f_bar.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let th = if n > 0 && sorted[n] == sorted[n - 1] {
        sorted[n - 1]
    } else {
        sorted[n].next_up()
    };
    let achieved = f_bar.iter().filter(|&&f| f >= th).count();
    Ok((th, achieved))
}

/// Loss of decisions `delta` given activation probabilities `f`.
pub fn risk(f: &[f64], delta: &[bool], params: &DecisionParams) -> f64 {
    let DecisionParams { k1, k2, t } = *params;
    f.iter()
        .zip(delta)
        .map(|(&fi, &d)| {
            let d = if d { 1.0 } else { 0.0 };
            -fi * d - (1.0 - fi) * (1.0 - d) + k1 * fi * (1.0 - d) + k2 * (1.0 - fi) * d + t * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_values() {
        assert_eq!(DecisionParams::new(12.0, 1.0, 1.0).unwrap().threshold(), 0.2);
        assert_eq!(DecisionParams::new(7.0, 1.0, 1.0).unwrap().threshold(), 0.3);
        assert!(DecisionParams::new(1e12, 1.0, 1.0).unwrap().threshold() < 1e-11);
        assert!(DecisionParams::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn single_active_voxel() {
        // Voxel 0 alternates 1, 3 (sd sqrt 2); voxel 1 is zero with tiny noise.
        let mu = vec![1.0, 0.0, 3.0, 1e-12];
        let s = posterior_m_matrix(&mu, 2, Reading::MonteCarlo).unwrap();
        assert!((s.f_bar[0] - 1.0).abs() < 1e-12);
        assert!(s.f_bar[1] < 1.0);
        let s = posterior_m_matrix(&[1.0, 0.0, 1.0, 0.0], 2, Reading::MonteCarlo).unwrap();
        assert_eq!(s.undefined, vec![0, 1]);
        assert_eq!(s.f_bar, vec![0.0, 0.0]);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu: Vec<f64> = (0..60).map(|_| rng.random::<f64>() - 0.3).collect();
        let scaled: Vec<f64> = mu.iter().map(|x| x * 7.5).collect();
        for r in [Reading::MonteCarlo, Reading::PlugIn] {
            let a = posterior_m_matrix(&mu, 6, r).unwrap();
            let b = posterior_m_matrix(&scaled, 6, r).unwrap();
            for (x, y) in a.f_bar.iter().zip(&b.f_bar) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn count_thresholds() {
        let f = [0.1, 0.5, 0.3, 0.9, 0.7];
        assert_eq!(threshold_for_count(&f, 0).unwrap(), (0.9f64.next_up(), 0));
        assert_eq!(threshold_for_count(&f, 5).unwrap(), (0.0, 5));
        let (th, k) = threshold_for_count(&f, 2).unwrap();
        assert_eq!(k, 2);
        assert!(th > 0.5 && th <= 0.7);
        let tied = [0.2, 0.5, 0.5, 0.9];
        assert_eq!(threshold_for_count(&tied, 2).unwrap(), (0.5, 3));
        assert!(threshold_for_count(&f, 6).is_err());
    }

    #[test]
    fn risk_edge_cases() {
        let p = DecisionParams::new(3.0, 0.0, 0.0).unwrap();
        assert_eq!(risk(&[1.0; 5], &[true; 5], &p), -5.0);
        assert_eq!(risk(&[0.0; 5], &[false; 5], &p), -5.0);
    }
}
