//! Convergence diagnostics over per-voxel traces from several chains.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::hmc::PosteriorDraws;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Between/within variance ratio `sqrt((W + B/n) / W)` over equal-length
/// chains. `None` when there are fewer than two chains, fewer than two draws,
/// or zero within-chain variance.
pub fn gelman_rubin(chains: &[&[f64]]) -> Option<f64> {
    let m = chains.len();
    if m < 2 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 2 {
        return None;
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(&c[..n])).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return None;
    }
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let b = n as f64 / (m as f64 - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    Some(((w + b / n as f64) / w).sqrt())
}

/// Autocovariances at every lag (biased, divisor `n`), via zero-padded FFT.
fn autocovariance(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v - m, 0.0)).collect();
    buf.resize(len, Complex64::new(0.0, 0.0));
    planner.plan_fft_forward(len).process(&mut buf);
    buf.iter_mut().for_each(|v| *v = Complex64::new(v.norm_sqr(), 0.0));
    planner.plan_fft_inverse(len).process(&mut buf);
    buf[..n].iter().map(|v| v.re / (len as f64 * n as f64)).collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone positive
/// sequence truncation. `None` for empty or constant input.
pub fn ess(chains: &[&[f64]]) -> Option<f64> {
    let m = chains.len();
    if m == 0 {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 4 {
        return None;
    }
    let mut planner = FftPlanner::new();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(&c[..n], &mut planner)).collect();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / nf).collect();
    let w = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let var_plus = if m > 1 {
        let g = means.iter().sum::<f64>() / m as f64;
        let b = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - g).powi(2)).sum::<f64>();
        w * (nf - 1.0) / nf + b / nf
    } else {
        w * (nf - 1.0) / nf
    };
    if !(var_plus > 0.0) {
        return None;
    }
    let rho = |t: usize| 1.0 - (w - acov.iter().map(|a| a[t]).sum::<f64>() / m as f64) / var_plus;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut p = rho(2 * k) + rho(2 * k + 1);
        if p <= 0.0 {
            break;
        }
        p = p.min(prev);
        tau += 2.0 * p;
        prev = p;
        k += 1;
    }
    // Antithetic chains can push tau toward zero; cap as Stan does.
    let total = m as f64 * nf;
    Some((total / tau).min(total * total.log10()))
}

/// Per-voxel Gelman–Rubin statistics across chains.
pub fn gelman_rubin_voxels(draws: &[PosteriorDraws]) -> Vec<Option<f64>> {
    per_voxel(draws, gelman_rubin)
}

/// Per-voxel effective sample sizes across chains.
pub fn ess_voxels(draws: &[PosteriorDraws]) -> Vec<Option<f64>> {
    per_voxel(draws, ess)
}

fn per_voxel(draws: &[PosteriorDraws], f: fn(&[&[f64]]) -> Option<f64>) -> Vec<Option<f64>> {
    use rayon::prelude::*;
    let n_vox = draws.first().map_or(0, |d| d.n_voxels);
    (0..n_vox)
        .into_par_iter()
        .map(|i| {
            let traces: Vec<Vec<f64>> = draws.iter().map(|d| d.voxel(i)).collect();
            let refs: Vec<&[f64]> = traces.iter().map(|t| t.as_slice()).collect();
            f(&refs)
        })
        .collect()
}

/// Fraction of voxels whose statistic is defined and at most `bound`.
pub fn fraction_at_most(stats: &[Option<f64>], bound: f64) -> f64 {
    if stats.is_empty() {
        return 0.0;
    }
    stats.iter().filter(|s| s.is_some_and(|v| v <= bound)).count() as f64 / stats.len() as f64
}

/// Median of the defined entries.
pub fn median(stats: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = stats.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}
