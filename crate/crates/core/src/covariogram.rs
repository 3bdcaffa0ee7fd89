//! Kernel estimation by minimum contrast against an empirical covariogram.
//!
//! The covariogram is collected with a dense raster scan: every masked voxel
//! is paired with the voxel at each offset in a [`PerturbationSet`], and each
//! unordered pair is visited at most once. The kernel is then fitted by
//! weighted least squares with COBYLA.

use std::io::Write;
use std::path::Path;

use cobyla::{minimize, Func, RhoBeg, StopTols};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::volume::MaskedVolume;

/// Grid index offsets scanned when collecting the covariogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSet {
    pub offsets: Vec<[i64; 3]>,
    pub n0: usize,
    pub n1: usize,
}

/// The zero row plus one representative of each of the 13 antipodal pairs of
/// unit-cube directions: `y = 1` with any `x, z`; `y = 0, x = 1` with any
/// `z`; and `+z`.
pub fn principal_directions() -> Vec<[i64; 3]> {
    let mut u = vec![[0, 0, 0]];
    for x in -1..=1 {
        for z in -1..=1 {
            u.push([x, 1, z]);
        }
    }
    for z in -1..=1 {
        u.push([1, 0, z]);
    }
    u.push([0, 0, 1]);
    u
}

/// All products `q * u` for `q` in `{1..n0}^3` and principal directions `u`,
/// then axis offsets `k e_i` for `n0 < k <= n1`, deduplicated in first-seen
/// order.
pub fn scan_perturbations(n0: usize, n1: usize) -> Result<PerturbationSet> {
    if n0 < 1 || n0 >= n1 {
        return Err(Error::InvalidArgument(format!(
            "perturbation bounds need 1 <= n0 < n1, got n0 = {n0}, n1 = {n1}"
        )));
    }
    let u = principal_directions();
    let mut seen = std::collections::HashSet::new();
    let mut offsets = Vec::new();
    let n = n0 as i64;
    for q0 in 1..=n {
        for q1 in 1..=n {
            for q2 in 1..=n {
                for row in &u {
                    let p = [q0 * row[0], q1 * row[1], q2 * row[2]];
                    if seen.insert(p) {
                        offsets.push(p);
                    }
                }
            }
        }
    }
    for k in n0 + 1..=n1 {
        let k = k as i64;
        for p in [[k, 0, 0], [0, k, 0], [0, 0, k]] {
            if seen.insert(p) {
                offsets.push(p);
            }
        }
    }
    Ok(PerturbationSet { offsets, n0, n1 })
}

/// Empirical covariances by offset.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariogramSummary {
    pub distances: Vec<f64>,
    pub covariances: Vec<f64>,
    pub weights: Vec<f64>,
    pub pair_counts: Vec<u64>,
}

impl CovariogramSummary {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Covariance at offset zero, if present and defined.
    pub fn sill(&self) -> Option<f64> {
        (0..self.len())
            .find(|&m| self.distances[m] == 0.0 && self.pair_counts[m] > 1)
            .map(|m| self.covariances[m])
    }

    /// Weighted least-squares contrast against `k`, optionally including the
    /// zero-distance entry.
    pub fn objective(&self, k: impl Fn(f64) -> f64, include_sill: bool) -> f64 {
        (0..self.len())
            .filter(|&m| self.weights[m] > 0.0 && (include_sill || self.distances[m] > 0.0))
            .map(|m| {
                let r = self.covariances[m] - k(self.distances[m]);
                self.weights[m] * r * r
            })
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "distance_mm,cov,weight,pairs").map_err(io)?;
        for m in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.distances[m], self.covariances[m], self.weights[m], self.pair_counts[m]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// `1 / (number of valid entries at the same distance)`, zero for entries
/// with fewer than two pairs.
fn distance_weights(distances: &[f64], counts: &[u64]) -> Vec<f64> {
    let valid: Vec<usize> = (0..distances.len()).filter(|&m| counts[m] > 1).collect();
    let mut order = valid.clone();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let mut weights = vec![0.0; distances.len()];
    let mut start = 0;
    while start < order.len() {
        let d0 = distances[order[start]];
        let mut end = start + 1;
        while end < order.len() && same_distance(distances[order[end]], d0) {
            end += 1;
        }
        let w = 1.0 / (end - start) as f64;
        for &m in &order[start..end] {
            weights[m] = w;
        }
        start = end;
    }
    weights
}

#[inline]
fn same_distance(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Scans every offset in `perts` over the masked voxels of `vol`.
///
/// Offsets that cannot fit inside the grid contribute no pairs and are
/// dropped from the summary, so a slab with one z-plane yields a purely 2D
/// covariogram. Pairs leaving the grid or the mask are skipped.
pub fn extract_covariogram(vol: &MaskedVolume, perts: &PerturbationSet) -> Result<CovariogramSummary> {
    let n_masked = vol.n_masked();
    if n_masked == 0 {
        return Err(Error::EmptyMask);
    }
    if n_masked < 2 {
        return Err(Error::Degenerate("covariogram needs at least two masked voxels".into()));
    }
    let g = &vol.grid;
    let dims = g.dims.map(|d| d as i64);
    let vs = g.voxel_size;
    // Centering does not change the estimator and keeps the sums small.
    let mean = vol.masked_values().iter().sum::<f64>() / n_masked as f64;
    let y: Vec<f64> = vol
        .data
        .iter()
        .zip(&vol.mask)
        .map(|(&v, &m)| if m { v - mean } else { 0.0 })
        .collect();
    if let Some(l) = (0..y.len()).find(|&l| vol.mask[l] && !vol.data[l].is_finite()) {
        return Err(Error::NonFiniteData(l));
    }
    let mask = &vol.mask;
    let kept: Vec<[i64; 3]> = perts
        .offsets
        .iter()
        .copied()
        .filter(|p| (0..3).all(|a| p[a].abs() < dims[a]))
        .collect();
    let stats: Vec<(f64, f64, f64, u64)> = kept
        .par_iter()
        .map(|p| {
            let (mut sab, mut sa, mut sb, mut r) = (0.0, 0.0, 0.0, 0u64);
            let i_lo = (-p[0]).max(0);
            let i_hi = dims[0].min(dims[0] - p[0]);
            let j_lo = (-p[1]).max(0);
            let j_hi = dims[1].min(dims[1] - p[1]);
            let k_lo = (-p[2]).max(0);
            let k_hi = dims[2].min(dims[2] - p[2]);
            let shift = p[0] + dims[0] * (p[1] + dims[1] * p[2]);
            for k in k_lo..k_hi {
                for j in j_lo..j_hi {
                    let row = dims[0] * (j + dims[1] * k);
                    let a0 = (row + i_lo) as usize;
                    let a1 = (row + i_hi) as usize;
                    let b0 = (row + i_lo + shift) as usize;
                    let ya = &y[a0..a1];
                    let yb = &y[b0..b0 + (a1 - a0)];
                    let ma = &mask[a0..a1];
                    let mb = &mask[b0..b0 + (a1 - a0)];
                    for t in 0..ya.len() {
                        if ma[t] && mb[t] {
                            sab += ya[t] * yb[t];
                            sa += ya[t];
                            sb += yb[t];
                            r += 1;
                        }
                    }
                }
            }
            (sab, sa, sb, r)
        })
        .collect();
    let distances: Vec<f64> = kept
        .iter()
        .map(|p| {
            let dx = p[0] as f64 * vs[0];
            let dy = p[1] as f64 * vs[1];
            let dz = p[2] as f64 * vs[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .collect();
    let covariances: Vec<f64> = stats
        .iter()
        .map(|&(sab, sa, sb, r)| {
            if r > 1 {
                let rf = r as f64;
                (sab - sa * sb / rf) / (rf - 1.0)
            } else {
                f64::NAN
            }
        })
        .collect();
    let pair_counts: Vec<u64> = stats.iter().map(|s| s.3).collect();
    let weights = distance_weights(&distances, &pair_counts);
    Ok(CovariogramSummary {
        distances,
        covariances,
        weights,
        pair_counts,
    })
}

/// Feasible region and optimizer settings for [`fit_mce`].
#[derive(Debug, Clone, PartialEq)]
pub struct MceOptions {
    pub nu_lo: f64,
    pub nu_hi: f64,
    /// Hold `tau_sq` at this value.
    pub fixed_tau_sq: Option<f64>,
    /// Enforce `psi <= nu`.
    pub psi_le_nu: bool,
    /// Fit `tau_sq + nugget` to the zero-distance entry as well.
    pub nugget: bool,
    pub max_evals: usize,
    pub ftol: f64,
    pub n_starts: usize,
}

impl Default for MceOptions {
    fn default() -> Self {
        Self {
            nu_lo: 1e-3,
            nu_hi: 2.0,
            fixed_tau_sq: None,
            psi_le_nu: true,
            nugget: false,
            max_evals: 500,
            ftol: 1e-10,
            n_starts: 5,
        }
    }
}

impl MceOptions {
    pub fn fixed_nu(nu: f64) -> Self {
        Self {
            nu_lo: nu,
            nu_hi: nu,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MceFit {
    pub params: KernelParams,
    /// Nugget variance, when fitted.
    pub nugget: Option<f64>,
    pub objective: f64,
    pub evaluations: usize,
    /// False when every start stopped on the evaluation budget or a failure.
    pub converged: bool,
}

/// Per-distance sums `(d, sum w, sum w c, sum w c^2)`; the contrast at a
/// distance is `A k^2 - 2 B k + C`.
fn aggregate(summary: &CovariogramSummary, include_sill: bool) -> Vec<(f64, f64, f64, f64)> {
    let mut entries: Vec<(f64, f64, f64)> = (0..summary.len())
        .filter(|&m| summary.weights[m] > 0.0 && (include_sill || summary.distances[m] > 0.0))
        .map(|m| (summary.distances[m], summary.weights[m], summary.covariances[m]))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (d, w, c) in entries {
        match out.last_mut() {
            Some(last) if same_distance(last.0, d) => {
                last.1 += w;
                last.2 += w * c;
                last.3 += w * c * c;
            }
            _ => out.push((d, w, w * c, w * c * c)),
        }
    }
    out
}

/// Contrast as a function of the correlation shape, with the amplitude
/// parameters solved in closed form.
///
/// For fixed `(psi, nu)` the model is linear in `tau_sq` (and in the nugget,
/// which only touches the zero-distance group), so the optimal amplitudes
/// are clamped one-dimensional least-squares solutions.
struct Profile<'a> {
    groups: &'a [(f64, f64, f64, f64)],
    c0: f64,
    fixed_tau_sq: Option<f64>,
    nugget: bool,
}

impl Profile<'_> {
    /// Returns `(contrast, tau_sq, nugget)`.
    fn eval(&self, psi: f64, nu: f64) -> (f64, f64, f64) {
        let shape = KernelParams {
            tau_sq: 1.0,
            psi,
            nu,
        };
        let (mut a_off, mut b_off, mut c_all) = (0.0, 0.0, 0.0);
        let (mut a0, mut b0) = (0.0, 0.0);
        for &(d, a, b, c) in self.groups {
            c_all += c;
            if d == 0.0 {
                a0 += a;
                b0 += b;
            } else {
                let rho = shape.cov(d);
                a_off += a * rho * rho;
                b_off += b * rho;
            }
        }
        let clamp = |t: f64| t.clamp(1e-12 * self.c0, self.c0);
        // Without a nugget the zero-distance group, when present, shares tau_sq.
        let solve = |with_zero: bool| {
            let (a, b) = if with_zero { (a_off + a0, b_off + b0) } else { (a_off, b_off) };
            if a > 0.0 {
                clamp(b / a)
            } else {
                self.c0
            }
        };
        let (tau, nug) = match (self.fixed_tau_sq, self.nugget) {
            (Some(t), false) => (t, 0.0),
            (Some(t), true) => (t, if a0 > 0.0 { (b0 / a0 - t).max(0.0) } else { 0.0 }),
            (None, false) => (solve(true), 0.0),
            (None, true) => {
                let t = solve(false);
                let gap = if a0 > 0.0 { b0 / a0 - t } else { 0.0 };
                if gap >= 0.0 {
                    (t, gap)
                } else {
                    (solve(true), 0.0)
                }
            }
        };
        let k0 = tau + nug;
        let mut f = c_all;
        f += a0 * k0 * k0 - 2.0 * b0 * k0;
        f += a_off * tau * tau - 2.0 * b_off * tau;
        (f.max(0.0), tau, nug)
    }
}

/// Minimizes the weighted least-squares contrast over the feasible region
/// `0 < tau_sq <= c0`, `psi > 0`, `nu_lo <= nu <= nu_hi` and optionally
/// `psi <= nu`, with `c0` the empirical sill. The result never has a larger
/// contrast than `init`.
///
/// COBYLA searches over the correlation shape `(log length, nu)` with
/// `psi = length^-nu`; amplitudes are profiled out exactly.
pub fn fit_mce(summary: &CovariogramSummary, init: &KernelParams, opts: &MceOptions) -> Result<MceFit> {
    if !(opts.nu_lo > 0.0 && opts.nu_lo <= opts.nu_hi && opts.nu_hi <= 2.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < nu_lo <= nu_hi <= 2, got [{}, {}]",
            opts.nu_lo, opts.nu_hi
        )));
    }
    let c0 = summary
        .sill()
        .ok_or_else(|| Error::Degenerate("covariogram has no zero-distance entry".into()))?;
    if !(c0 > 0.0) {
        return Err(Error::Degenerate(format!(
            "empirical sill is {c0}; the tau_sq feasible region is empty"
        )));
    }
    let groups = aggregate(summary, opts.nugget);
    let n_fit = groups.iter().filter(|g| g.0 > 0.0).count();
    if n_fit < 3 {
        return Err(Error::Degenerate(format!(
            "{n_fit} weighted covariogram distances; need at least 3"
        )));
    }
    if let Some(t) = opts.fixed_tau_sq {
        if !(t > 0.0 && t <= c0) {
            return Err(Error::InvalidArgument(format!(
                "fixed tau_sq {t} is outside (0, {c0}]"
            )));
        }
    }
    let feasible = |tau: f64, psi: f64, nu: f64| {
        tau > 0.0
            && tau <= c0 * (1.0 + 1e-12)
            && psi > 0.0
            && nu >= opts.nu_lo
            && nu <= opts.nu_hi
            && (!opts.psi_le_nu || psi <= nu * (1.0 + 1e-12))
    };
    if !feasible(opts.fixed_tau_sq.unwrap_or(init.tau_sq), init.psi, init.nu) {
        return Err(Error::InvalidArgument(format!(
            "initial kernel ({}, {}, {}) is outside the feasible region (sill {c0})",
            init.tau_sq, init.psi, init.nu
        )));
    }
    let profile = Profile {
        groups: &groups,
        c0,
        fixed_tau_sq: opts.fixed_tau_sq,
        nugget: opts.nugget,
    };
    let free_nu = opts.nu_lo < opts.nu_hi;
    let unpack = |x: &[f64]| {
        let nu = if free_nu { x[1] } else { opts.nu_lo };
        ((-nu * x[0]).exp(), nu)
    };
    let pack = |psi: f64, nu: f64| {
        let mut x = vec![-psi.ln() / nu];
        if free_nu {
            x.push(nu);
        }
        x
    };
    let objective = |x: &[f64], _: &mut ()| {
        let (psi, nu) = unpack(x);
        let f = profile.eval(psi, nu).0;
        if f.is_finite() && psi > 0.0 {
            f
        } else {
            f64::MAX
        }
    };
    // The starting point's own contrast, with its own amplitude.
    let init_contrast = {
        let tau = opts.fixed_tau_sq.unwrap_or(init.tau_sq);
        let k = KernelParams { tau_sq: tau, ..*init };
        let mut f = 0.0;
        for &(d, a, b, c) in &groups {
            let kd = k.cov(d);
            f += a * kd * kd - 2.0 * b * kd + c;
        }
        f.max(0.0)
    };

    let min_d = summary
        .distances
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let max_d = summary.distances.iter().copied().fold(0.0, f64::max);
    let mut bounds = vec![((1e-3 * min_d).ln(), (1e3 * max_d).ln())];
    if free_nu {
        bounds.push((opts.nu_lo, opts.nu_hi));
    }
    let mut starts = vec![(init.psi, init.nu)];
    let nu_hi_mid = (opts.nu_lo + opts.nu_hi) / 2.0;
    for (i, width) in [2.0, 4.0, 8.0, 16.0].iter().enumerate() {
        if starts.len() >= opts.n_starts.max(1) {
            break;
        }
        let nu = if !free_nu {
            opts.nu_lo
        } else if i % 2 == 0 {
            1.0f64.clamp(opts.nu_lo, opts.nu_hi)
        } else {
            nu_hi_mid
        };
        let mut psi = std::f64::consts::LN_2 * (2.0 / (width * min_d)).powf(nu);
        if opts.psi_le_nu {
            psi = psi.min(0.9 * nu);
        }
        starts.push((psi, nu));
    }
    let psi_le_nu = |x: &[f64], _: &mut ()| {
        let (psi, nu) = unpack(x);
        nu - psi
    };
    let cons: Vec<&dyn Func<()>> = if opts.psi_le_nu { vec![&psi_le_nu] } else { vec![] };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluations = 0;
    let mut converged = false;
    for &(psi, nu) in &starts {
        let x0 = pack(psi, nu);
        let rho: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| (0.1 * (hi - lo)).min(0.5))
            .collect();
        let tols = StopTols {
            ftol_rel: opts.ftol,
            xtol_rel: 1e-10,
            ..StopTols::default()
        };
        let calls = std::cell::Cell::new(0usize);
        let counted = |x: &[f64], u: &mut ()| {
            calls.set(calls.get() + 1);
            objective(x, u)
        };
        let outcome = minimize(counted, &x0, &bounds, &cons, (), opts.max_evals, RhoBeg::Set(rho), Some(tols));
        evaluations += calls.get();
        let (ok, x) = match outcome {
            Ok((status, x, _)) => (!matches!(status, cobyla::SuccessStatus::MaxEvalReached), x),
            Err((status, x, _)) => {
                log::warn!("COBYLA start failed with {status:?}");
                (false, x)
            }
        };
        let (p, n) = unpack(&x);
        let (f, t, _) = profile.eval(p, n);
        if !feasible(t, p, n) {
            continue;
        }
        converged |= ok;
        if best.as_ref().is_none_or(|b| f < b.0) {
            best = Some((f, x));
        }
    }
    if !converged {
        log::warn!("kernel fit did not converge within {} evaluations per start", opts.max_evals);
    }
    let Some((f, x)) = best.filter(|b| b.0 <= init_contrast) else {
        return Ok(MceFit {
            params: KernelParams::new(opts.fixed_tau_sq.unwrap_or(init.tau_sq), init.psi, init.nu)?,
            nugget: opts.nugget.then_some(0.0),
            objective: init_contrast,
            evaluations,
            converged,
        });
    };
    let (psi, nu) = unpack(&x);
    let (_, tau, nug) = profile.eval(psi, nu);
    Ok(MceFit {
        params: KernelParams::new(tau, psi, nu)?,
        nugget: opts.nugget.then_some(nug),
        objective: f,
        evaluations,
        converged,
    })
}

/// Options for [`estimate_kernel`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub n0: usize,
    pub n1: usize,
    pub mce: MceOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            n0: 18,
            n1: 25,
            mce: MceOptions::default(),
        }
    }
}

/// Covariogram extraction followed by a minimum-contrast fit from a
/// data-scaled starting point.
pub fn estimate_kernel(vol: &MaskedVolume, opts: &EstimateOptions) -> Result<(MceFit, CovariogramSummary)> {
    let perts = scan_perturbations(opts.n0, opts.n1)?;
    let summary = extract_covariogram(vol, &perts)?;
    let c0 = summary
        .sill()
        .ok_or_else(|| Error::Degenerate("covariogram has no zero-distance entry".into()))?;
    if !(c0 > 0.0) {
        return Err(Error::Degenerate(
            "image has zero empirical variance; no kernel can be fitted".into(),
        ));
    }
    let nu = opts.mce.nu_lo.max(opts.mce.nu_hi.min(1.0));
    let vs = vol.grid.voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    let psi = (std::f64::consts::LN_2 * (2.0 / (4.0 * vs)).powf(nu)).min(0.9 * nu);
    let tau = opts.mce.fixed_tau_sq.unwrap_or(0.5 * c0);
    let init = KernelParams::new(tau, psi, nu)?;
    let fit = fit_mce(&summary, &init, &opts.mce)?;
    Ok((fit, summary))
}

/// Writes `distance_mm,k_fit` at `n` evenly spaced distances in `[0, max_d]`.
pub fn write_fit_curve(params: &KernelParams, max_d: f64, n: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "distance_mm,k_fit").map_err(io)?;
    for i in 0..n {
        let d = if n > 1 { max_d * i as f64 / (n - 1) as f64 } else { 0.0 };
        writeln!(w, "{d},{}", params.cov(d)).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn directions_cover_half_space() {
        let u = principal_directions();
        assert_eq!(u.len(), 14);
        for x in -1i64..=1 {
            for y in -1i64..=1 {
                for z in -1i64..=1 {
                    if (x, y, z) == (0, 0, 0) {
                        continue;
                    }
                    let has = u.contains(&[x, y, z]);
                    let neg = u.contains(&[-x, -y, -z]);
                    assert!(has ^ neg, "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn small_scan_contents() {
        let p = scan_perturbations(2, 3).unwrap();
        for e in [[3, 0, 0], [0, 3, 0], [0, 0, 3]] {
            assert!(p.offsets.contains(&e));
        }
        let set: std::collections::HashSet<_> = p.offsets.iter().collect();
        assert_eq!(set.len(), p.offsets.len());
        for o in &p.offsets {
            if *o != [0, 0, 0] {
                assert!(!set.contains(&[-o[0], -o[1], -o[2]]));
            }
        }
        // Half of the 5^3 cube minus the origin, the origin, three axis offsets.
        assert_eq!(p.offsets.len(), (125 - 1) / 2 + 1 + 3);
        assert!(scan_perturbations(3, 3).is_err());
    }

    #[test]
    fn default_scan_size() {
        let p = scan_perturbations(18, 25).unwrap();
        assert_eq!(p.offsets.len(), (37usize.pow(3) - 1) / 2 + 1 + 21);
    }

    fn vol(dims: [usize; 3], data: Vec<f64>) -> MaskedVolume {
        MaskedVolume::full(Grid3::new(dims, [1.0; 3], [0.0; 3]).unwrap(), data).unwrap()
    }

    #[test]
    fn constant_volume_has_zero_covariance() {
        let v = vol([6, 5, 3], vec![5.0; 90]);
        let s = extract_covariogram(&v, &scan_perturbations(2, 4).unwrap()).unwrap();
        assert!(s.covariances.iter().filter(|c| !c.is_nan()).all(|&c| c == 0.0));
        let err = estimate_kernel(
            &v,
            &EstimateOptions {
                n0: 2,
                n1: 4,
                ..EstimateOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn single_pair_gets_zero_weight() {
        let v = vol([2, 1, 1], vec![1.0, 3.0]);
        let perts = PerturbationSet {
            offsets: vec![[1, 0, 0]],
            n0: 1,
            n1: 2,
        };
        let s = extract_covariogram(&v, &perts).unwrap();
        assert_eq!(s.pair_counts, vec![1]);
        assert_eq!(s.weights, vec![0.0]);
        assert!(s.covariances[0].is_nan());
    }

    #[test]
    fn weights_count_valid_entries_per_distance() {
        let d = [0.0, 1.0, 1.0, 1.0, 2.0, 1.0];
        let r = [10, 5, 5, 1, 3, 5];
        let w = distance_weights(&d, &r);
        assert_eq!(w, vec![1.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0, 1.0 / 3.0]);
    }

    #[test]
    fn white_noise_covariogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..32 * 32 * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = vol([32, 32, 16], data);
        let s = extract_covariogram(&v, &scan_perturbations(4, 6).unwrap()).unwrap();
        assert!((s.sill().unwrap() - 1.0).abs() < 0.1);
        for m in 0..s.len() {
            if s.distances[m] > 0.0 {
                assert!(s.covariances[m].abs() < 0.1);
            }
        }
    }

    #[test]
    fn flat_grid_prunes_out_of_plane_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v = vol([8, 8, 1], data);
        let s = extract_covariogram(&v, &scan_perturbations(3, 5).unwrap()).unwrap();
        // 2D half-plane of the 7x7 square plus origin and x/y axis extensions.
        assert_eq!(s.len(), (49 - 1) / 2 + 1 + 4);
    }

    fn synthetic(theta: &KernelParams, with_sill: f64) -> CovariogramSummary {
        let perts = scan_perturbations(4, 8).unwrap();
        let distances: Vec<f64> = perts
            .offsets
            .iter()
            .map(|p| ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) as f64).sqrt())
            .collect();
        let covariances = distances
            .iter()
            .map(|&d| if d == 0.0 { with_sill } else { theta.cov(d) })
            .collect();
        let pair_counts = vec![100; distances.len()];
        let weights = distance_weights(&distances, &pair_counts);
        CovariogramSummary {
            distances,
            covariances,
            weights,
            pair_counts,
        }
    }

    #[test]
    fn recovers_noiseless_kernel() {
        let truth = KernelParams::new(1.0, 0.2, 1.0).unwrap();
        let s = synthetic(&truth, 1.5);
        let init = KernelParams::new(0.5, 0.5, 1.5).unwrap();
        let fit = fit_mce(&s, &init, &MceOptions::default()).unwrap();
        assert!(fit.objective < 1e-10, "{fit:?}");
        assert!((fit.params.tau_sq - 1.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.params.psi - 0.2).abs() < 1e-3, "{fit:?}");
        assert!((fit.params.nu - 1.0).abs() < 1e-3, "{fit:?}");
        assert!(fit.objective <= s.objective(|d| init.cov(d), false));
    }

    #[test]
    fn nugget_mode_fits_sill() {
        let truth = KernelParams::new(0.8, 0.3, 1.0).unwrap();
        let s = synthetic(&truth, 1.1);
        let init = KernelParams::new(0.5, 0.5, 1.0).unwrap();
        let opts = MceOptions {
            nugget: true,
            ..MceOptions::fixed_nu(1.0)
        };
        let fit = fit_mce(&s, &init, &opts).unwrap();
        assert!((fit.params.tau_sq - 0.8).abs() < 1e-3, "{fit:?}");
        assert!((fit.nugget.unwrap() - 0.3).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn rejects_infeasible_init() {
        let truth = KernelParams::new(1.0, 0.2, 1.0).unwrap();
        let s = synthetic(&truth, 1.5);
        let init = KernelParams::new(2.0, 0.2, 1.0).unwrap();
        assert!(fit_mce(&s, &init, &MceOptions::default()).is_err());
        let init = KernelParams::new(1.0, 1.8, 1.0).unwrap();
        assert!(fit_mce(&s, &init, &MceOptions::default()).is_err());
    }

    #[test]
    fn one_dimensional_fit_matches_golden_section() {
        let truth = KernelParams::new(1.0, 0.25, 1.0).unwrap();
        let mut s = synthetic(&truth, 1.4);
        for (m, c) in s.covariances.iter_mut().enumerate() {
            *c += 0.02 * ((m as f64) * 1.7).sin();
        }
        let opts = MceOptions {
            fixed_tau_sq: Some(1.0),
            ..MceOptions::fixed_nu(1.0)
        };
        let init = KernelParams::new(1.0, 0.5, 1.0).unwrap();
        let fit = fit_mce(&s, &init, &opts).unwrap();
        let f = |psi: f64| s.objective(|d| KernelParams::new(1.0, psi, 1.0).unwrap().cov(d), false);
        let (mut a, mut b) = (0.01f64, 1.0f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        assert!((fit.params.psi - (a + b) / 2.0).abs() < 1e-6, "{fit:?} vs {a}");
        assert_eq!(fit.params.tau_sq, 1.0);
    }

    #[test]
    fn objective_is_permutation_invariant() {
        let truth = KernelParams::new(1.0, 0.2, 1.0).unwrap();
        let mut s = synthetic(&truth, 1.5);
        let k = KernelParams::new(0.7, 0.4, 1.3).unwrap();
        let before = s.objective(|d| k.cov(d), false);
        s.distances.reverse();
        s.covariances.reverse();
        s.weights.reverse();
        s.pair_counts.reverse();
        let after = s.objective(|d| k.cov(d), false);
        assert!((before - after).abs() <= 1e-12 * before);
    }
}
