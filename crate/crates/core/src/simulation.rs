//! Two-dimensional dual-resolution experiments: a midsagittal-like slice
//! with three smoothed activation shapes over a Gaussian-process
//! background, observed at 1.8 mm and 3 mm, scored by MSE and by error rates
//! at a fixed number of discoveries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::circulant::{CirculantEmbedding, EmbeddingOptions};
use crate::decision::{posterior_m, threshold_for_count, Reading};
use crate::error::{Error, Result};
use crate::hmc::HmcConfig;
use crate::kernel::KernelParams;
use crate::kriging::KrigingWeights;
use crate::methods::{Method, MethodContext, MethodFit};
use crate::rng;
use crate::volume::{Grid3, MaskedVolume};

pub const HIGH_VOXEL: f64 = 1.8;
pub const STD_VOXEL: f64 = 3.0;
pub const HIGH_DIMS: [usize; 3] = [104, 65, 1];
/// Standard-grid origin; offset so the two lattices never align.
pub const STD_ORIGIN: [f64; 3] = [-0.6, -0.6, 0.0];
pub const DEFAULT_DISCOVERIES: usize = 450;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    Exponential,
    Gaussian,
}

impl KernelKind {
    pub fn nu(self) -> f64 {
        match self {
            KernelKind::Exponential => 1.0,
            KernelKind::Gaussian => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Gaussian => "gaussian",
        }
    }

    fn id(self) -> u64 {
        match self {
            KernelKind::Exponential => 1,
            KernelKind::Gaussian => 2,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(KernelKind::Exponential),
            "gaussian" | "gauss" => Ok(KernelKind::Gaussian),
            _ => Err(Error::InvalidArgument(format!(
                "unknown kernel '{s}' (expected exponential or gaussian)"
            ))),
        }
    }
}

/// One cell of the experimental design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimDesign {
    pub kernel: KernelKind,
    pub snr_h: f64,
    /// Standard-res SNR divided by high-res SNR.
    pub snr_ratio: f64,
    pub background_var: f64,
    pub background_fwhm: f64,
    pub activation_amp: f64,
    pub activation_threshold: f64,
}

impl SimDesign {
    pub fn new(kernel: KernelKind, snr_h: f64, snr_ratio: f64) -> Self {
        Self {
            kernel,
            snr_h,
            snr_ratio,
            background_var: 0.2,
            background_fwhm: 6.0,
            activation_amp: 2.0,
            activation_threshold: 0.4,
        }
    }

    pub fn background(&self) -> Result<KernelParams> {
        KernelParams::from_fwhm(self.background_fwhm, self.kernel.nu(), self.background_var)
    }

    /// Radius beyond which the background correlation falls below 0.05.
    pub fn radius(&self) -> Result<f64> {
        Ok(self.background()?.radius_for_correlation(0.05))
    }
}

/// Fixed slice geometry: masks on both grids and the activation pattern.
#[derive(Debug, Clone)]
pub struct Geometry {
    /// High-res grid and brain mask; data holds the activation signal.
    pub high: MaskedVolume,
    /// Standard-res grid and brain mask; data is zero.
    pub std: MaskedVolume,
    /// Activation signal per masked high-res voxel.
    pub signal: Vec<f64>,
    /// Truly active flag per masked high-res voxel.
    pub active: Vec<bool>,
}

impl Geometry {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Brain outline: cerebrum, cerebellum and brainstem.
fn in_brain(x: f64, y: f64, cx: f64, cy: f64) -> bool {
    const A: f64 = 90.0;
    const B: f64 = 54.0;
    let ell = |x0: f64, y0: f64, a: f64, b: f64| ((x - x0) / a).powi(2) + ((y - y0) / b).powi(2) <= 1.0;
    ell(cx, cy, A, B)
        || ell(cx + 0.55 * A, cy - 0.62 * B, 0.38 * A, 0.36 * B)
        || ((x - (cx + 0.2 * A)).abs() < 0.12 * A && y < cy - 0.5 * B && y > cy - 1.05 * B)
}

/// Separable Gaussian smoothing with unit-sum taps, zero outside the grid.
fn smooth(img: &[f64], nx: usize, ny: usize, fwhm_vox: f64) -> Vec<f64> {
    let sigma = fwhm_vox / (8.0 * std::f64::consts::LN_2).sqrt();
    let rad = (4.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-rad..=rad).map(|t| (-0.5 * (t as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; src.len()];
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for (t, w) in (-rad..=rad).zip(&taps) {
                    let (ii, jj) = if along_x { (i as i64 + t, j as i64) } else { (i as i64, j as i64 + t) };
                    if ii >= 0 && jj >= 0 && (ii as usize) < nx && (jj as usize) < ny {
                        acc += w * src[ii as usize + nx * jj as usize];
                    }
                }
                out[i + nx * j] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Builds the slice. A T-shape sits in the frontal lobe, a disc above the
/// cerebellum and a 2x2 square near the parietal-occipital border; the
/// default design yields exactly 450 active voxels.
pub fn geometry(design: &SimDesign) -> Result<Geometry> {
    let [nx, ny, _] = HIGH_DIMS;
    let h = HIGH_VOXEL;
    let grid = Grid3::new(HIGH_DIMS, [h; 3], [0.0; 3])?;
    let cx = (nx - 1) as f64 * h / 2.0;
    let cy = 1.05 * 54.0 + 2.0 * h;
    let (a, b) = (90.0, 54.0);
    let pos = |i: usize, j: usize| (i as f64 * h, j as f64 * h);
    let mask: Vec<bool> = (0..nx * ny)
        .map(|l| {
            let (x, y) = pos(l % nx, l / nx);
            in_brain(x, y, cx, cy)
        })
        .collect();

    let mut shapes = vec![0.0; nx * ny];
    let mut set = |i: usize, j: usize| shapes[i + nx * j] = 1.0;
    let (bar_w, bar_h, stem_h) = (17, 3, 13);
    let i0 = ((cx - 0.6 * a) / h).round() as usize;
    let j0 = ((cy + 0.3 * b) / h).round() as usize;
    for i in i0..i0 + bar_w {
        for j in j0..j0 + bar_h {
            set(i, j);
        }
    }
    let s0 = i0 + bar_w / 2 - 1;
    for i in s0..s0 + 2 {
        for j in j0 - stem_h..j0 {
            set(i, j);
        }
    }
    let (dx, dy, radius) = (cx + 0.45 * a, cy - 0.62 * b, 15.8);
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = pos(i, j);
            if (x - dx).powi(2) + (y - dy).powi(2) <= radius * radius {
                set(i, j);
            }
        }
    }
    let i1 = ((cx + 0.5 * a) / h).round() as usize;
    let j1 = ((cy + 0.4 * b) / h).round() as usize;
    for i in i1..i1 + 2 {
        for j in j1..j1 + 2 {
            set(i, j);
        }
    }

    let smoothed = smooth(&shapes, nx, ny, design.background_fwhm / h);
    let mut signal_full = vec![0.0; nx * ny];
    for l in 0..nx * ny {
        let s = design.activation_amp * smoothed[l];
        if mask[l] && s >= design.activation_threshold && design.activation_amp > 0.0 {
            signal_full[l] = s;
        }
    }
    let high = MaskedVolume::new(grid, mask.clone(), signal_full.clone())?;
    let signal = high.masked_values();
    let active: Vec<bool> = signal.iter().map(|&s| s > 0.0).collect();

    let extent = |n: usize| ((n as f64 * h + 1.2) / STD_VOXEL).ceil() as usize + 1;
    let sgrid = Grid3::new([extent(nx), extent(ny), 1], [STD_VOXEL; 3], STD_ORIGIN)?;
    let mut smask = vec![false; sgrid.len()];
    for l in high.masked_indices() {
        let p = high.grid.world_coords(high.grid.index_of(l))?;
        if let Some(idx) = sgrid.voxel_containing(p) {
            smask[sgrid.linear_index(idx)] = true;
        }
    }
    let n_std = sgrid.len();
    let std = MaskedVolume::new(sgrid, smask, vec![0.0; n_std])?;
    Ok(Geometry {
        high,
        std,
        signal,
        active,
    })
}

/// Ground truth for one replicate, per masked high-res voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub mu_h: Vec<f64>,
    pub active: Vec<bool>,
}

/// Background draw plus the activation signal on active voxels.
pub fn make_truth<R: Rng + ?Sized>(geom: &Geometry, background: &CirculantEmbedding, rng: &mut R) -> Truth {
    let u = background.sample_prior(rng);
    let bg = background.restrict(&u);
    Truth {
        mu_h: bg.iter().zip(&geom.signal).map(|(b, s)| b + s).collect(),
        active: geom.active.clone(),
    }
}

/// Noisy observations on both grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub y_h: Vec<f64>,
    pub y_s: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub sigma_h_sq: f64,
    pub sigma_s_sq: f64,
}

fn mean_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Noisy observations. The two images draw noise from separate streams so
/// that `y_h` can be shared by designs differing only in the SNR ratio.
pub fn make_data<R: Rng + ?Sized>(
    truth: &Truth,
    design: &SimDesign,
    w: &KrigingWeights,
    rng_h: &mut R,
    rng_s: &mut R,
) -> Result<SimData> {
    if !(design.snr_h > 0.0 && design.snr_ratio > 0.0) {
        return Err(Error::InvalidArgument("SNR and SNR ratio must be positive".into()));
    }
    let mu_s = w.apply(&truth.mu_h)?;
    let sigma_h_sq = mean_sq(&truth.mu_h) / design.snr_h;
    let sigma_s_sq = mean_sq(&mu_s) / (design.snr_h * design.snr_ratio);
    let noisy = |mu: &[f64], var: f64, rng: &mut R| -> Vec<f64> {
        let sd = var.sqrt();
        mu.iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let y_h = noisy(&truth.mu_h, sigma_h_sq, rng_h);
    let y_s = noisy(&mu_s, sigma_s_sq, rng_s);
    Ok(SimData {
        y_h,
        y_s,
        mu_s,
        sigma_h_sq,
        sigma_s_sq,
    })
}

/// Per-method score of one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub method: Method,
    pub replicate: usize,
    pub mse: f64,
    pub false_neg_rate: f64,
    pub false_pos_rate: f64,
    pub discoveries: usize,
}

/// MSE of the posterior mean and error rates at `n_discoveries` reported
/// voxels ranked by `f_bar`.
pub fn score_estimates(
    method: Method,
    replicate: usize,
    mean: &[f64],
    f_bar: &[f64],
    truth: &Truth,
    n_discoveries: usize,
) -> Result<SimResult> {
    if mean.len() != truth.mu_h.len() || f_bar.len() != truth.mu_h.len() {
        return Err(Error::DimensionMismatch("estimates and truth differ in length".into()));
    }
    let mse = mean
        .iter()
        .zip(&truth.mu_h)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / mean.len() as f64;
    let (th, discoveries) = threshold_for_count(f_bar, n_discoveries)?;
    let (fnr, fpr) = error_rates(f_bar, &truth.active, th);
    Ok(SimResult {
        method,
        replicate,
        mse,
        false_neg_rate: fnr,
        false_pos_rate: fpr,
        discoveries,
    })
}

/// `(false-negative rate, false-positive rate)` when reporting `f >= th`.
fn error_rates(f_bar: &[f64], active: &[bool], th: f64) -> (f64, f64) {
    let n_act = active.iter().filter(|&&a| a).count();
    let n_inact = active.len() - n_act;
    let mut missed = 0;
    let mut false_pos = 0;
    for (&f, &a) in f_bar.iter().zip(active) {
        match (a, f >= th) {
            (true, false) => missed += 1,
            (false, true) => false_pos += 1,
            _ => {}
        }
    }
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    (rate(missed, n_act), rate(false_pos, n_inact))
}

pub fn score(fit: &MethodFit, truth: &Truth, replicate: usize, n_discoveries: usize) -> Result<SimResult> {
    let stats = posterior_m(&fit.chains, Reading::MonteCarlo)?;
    score_estimates(fit.method, replicate, &stats.mean, &stats.f_bar, truth, n_discoveries)
}

/// One ROC point per distinct threshold, ordered by increasing threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_pos: f64,
    pub false_neg: f64,
}

pub fn roc(f_bar: &[f64], active: &[bool]) -> Vec<RocPoint> {
    let mut ths: Vec<f64> = f_bar.to_vec();
    ths.sort_by(f64::total_cmp);
    ths.dedup();
    ths.into_iter()
        .map(|th| {
            let (fnr, fpr) = error_rates(f_bar, active, th);
            RocPoint {
                threshold: th,
                false_pos: fpr,
                false_neg: fnr,
            }
        })
        .collect()
}

/// Sampler and scoring settings shared by every fit of a sweep.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub hmc: HmcConfig,
    pub methods: Vec<Method>,
    pub n_discoveries: usize,
    pub embedding: EmbeddingOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            hmc: HmcConfig::default(),
            methods: Method::ALL.to_vec(),
            n_discoveries: DEFAULT_DISCOVERIES,
            embedding: EmbeddingOptions {
                allow_extend: true,
                allow_clamp: true,
            },
        }
    }
}

/// Everything that stays fixed across replicates of one kernel.
#[derive(Debug)]
pub struct SimSetup {
    pub geometry: Geometry,
    pub context: MethodContext,
}

impl SimSetup {
    pub fn new(design: &SimDesign, config: &SimConfig) -> Result<Self> {
        let geometry = geometry(design)?;
        let context = MethodContext::new(
            &geometry.high,
            Some(&geometry.std),
            design.background()?,
            design.radius()?,
            config.embedding,
        )?;
        Ok(Self { geometry, context })
    }

    pub fn w(&self) -> &KrigingWeights {
        self.context.w().expect("simulation context always has a standard grid")
    }

    /// Truth and data of one replicate. Truth depends only on the kernel and
    /// replicate, so every SNR cell of a sweep shares it; `y_h` is also
    /// shared across SNR ratios.
    pub fn replicate(&self, design: &SimDesign, seed: u64, replicate: usize) -> Result<(Truth, SimData)> {
        let path = |purpose: u64| [rng::REPLICATES, design.kernel.id(), replicate as u64, purpose];
        let mut truth_rng = rng::stream(seed, &path(0));
        let truth = make_truth(&self.geometry, self.context.high_embedding(), &mut truth_rng);
        let snr = design.snr_h.to_bits();
        let cell = (snr ^ design.snr_ratio.to_bits().rotate_left(32)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng_h = rng::stream(seed, &[rng::REPLICATES, design.kernel.id(), replicate as u64, 1, snr]);
        let mut rng_s = rng::stream(seed, &[rng::REPLICATES, design.kernel.id(), replicate as u64, 2, cell]);
        let data = make_data(&truth, design, self.w(), &mut rng_h, &mut rng_s)?;
        Ok((truth, data))
    }
}

/// Runs every configured method on one replicate's data.
pub fn run_methods(setup: &SimSetup, data: &SimData, config: &SimConfig, seed: u64) -> Result<Vec<MethodFit>> {
    config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let hmc = HmcConfig {
                seed: seed.wrapping_add(k as u64),
                ..config.hmc.clone()
            };
            setup
                .context
                .fit(m, Some(&data.y_h), None, Some(&data.y_s), &hmc)
        })
        .collect()
}

/// Mean and standard error of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let se = if x.len() > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, se }
    }
}

/// Aggregated results of one method in one design cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub kernel: KernelKind,
    pub snr_h: f64,
    pub snr_ratio: f64,
    pub method: Method,
    pub mse: MeanSe,
    pub false_neg: MeanSe,
    pub false_pos: MeanSe,
    pub replicates: usize,
    pub failed: usize,
}

/// Results of a sweep: per-replicate scores and per-cell aggregates.
#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub results: Vec<(SimDesign, SimResult)>,
    pub cells: Vec<CellSummary>,
}

impl SweepTable {
    pub fn cell(&self, kernel: KernelKind, snr_h: f64, ratio: f64, method: Method) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.kernel == kernel && c.snr_h == snr_h && c.snr_ratio == ratio && c.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("model,kernel,snr_ratio,snr_h,mse,false_neg_mean,false_neg_se\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                c.method, c.kernel, c.snr_ratio, c.snr_h, c.mse.mean, c.false_neg.mean, c.false_neg.se
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Runs `replicates` replicates of every design, parallel over replicates.
/// Failed replicates are logged and excluded; their count is reported per
/// cell.
pub fn run_sweep(designs: &[SimDesign], replicates: usize, config: &SimConfig, seed: u64) -> Result<SweepTable> {
    run_sweep_with(designs, replicates, config, seed, |_, _, _, _| Ok(()))
}

/// As [`run_sweep`], calling `on_fit(design, replicate, truth, fit)` after
/// each method fit, e.g. to record ROC curves or sampler health.
pub fn run_sweep_with<F>(
    designs: &[SimDesign],
    replicates: usize,
    config: &SimConfig,
    seed: u64,
    on_fit: F,
) -> Result<SweepTable>
where
    F: Fn(&SimDesign, usize, &Truth, &MethodFit) -> Result<()> + Sync,
{
    let mut setups: BTreeMap<KernelKind, SimSetup> = BTreeMap::new();
    for d in designs {
        if !setups.contains_key(&d.kernel) {
            setups.insert(d.kernel, SimSetup::new(d, config)?);
        }
    }
    let mut table = SweepTable::default();
    for (di, design) in designs.iter().enumerate() {
        let setup = &setups[&design.kernel];
        let outcomes: Vec<Result<Vec<SimResult>>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let (truth, data) = setup.replicate(design, seed, r)?;
                let hmc_seed = rng::stream(seed, &[rng::MISC, di as u64, r as u64]).random::<u64>();
                let fits = run_methods(setup, &data, config, hmc_seed)?;
                fits.iter()
                    .map(|f| {
                        on_fit(design, r, &truth, f)?;
                        score(f, &truth, r, config.n_discoveries)
                    })
                    .collect()
            })
            .collect();
        let mut per_method: BTreeMap<Method, Vec<SimResult>> = BTreeMap::new();
        let mut failed = 0;
        for (r, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(rs) => {
                    for s in rs {
                        table.results.push((*design, s));
                        per_method.entry(s.method).or_default().push(s);
                    }
                }
                Err(e) => {
                    warn!("{} snr_h={} ratio={} replicate {r} failed: {e}", design.kernel, design.snr_h, design.snr_ratio);
                    failed += 1;
                }
            }
        }
        for (method, rs) in per_method {
            let col = |f: fn(&SimResult) -> f64| rs.iter().map(f).collect::<Vec<_>>();
            let cell = CellSummary {
                kernel: design.kernel,
                snr_h: design.snr_h,
                snr_ratio: design.snr_ratio,
                method,
                mse: MeanSe::of(&col(|s| s.mse)),
                false_neg: MeanSe::of(&col(|s| s.false_neg_rate)),
                false_pos: MeanSe::of(&col(|s| s.false_pos_rate)),
                replicates: rs.len(),
                failed,
            };
            info!(
                "{} snr_h={} ratio={} {}: mse {:.4} ({:.4}) false- {:.4} ({:.4})",
                cell.kernel, cell.snr_h, cell.snr_ratio, method, cell.mse.mean, cell.mse.se, cell.false_neg.mean,
                cell.false_neg.se
            );
            table.cells.push(cell);
        }
    }
    Ok(table)
}

/// Writes an ROC curve as `threshold,false_pos,false_neg` rows.
pub fn write_roc(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("threshold,false_pos,false_neg\n");
    for p in points {
        body.push_str(&format!("{:.8},{:.6},{:.6}\n", p.threshold, p.false_pos, p.false_neg));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
