use std::fs;
use std::path::{Path, PathBuf};

use dualres_core::covariogram::{estimate_kernel, write_fit_curve, EstimateOptions, MceOptions};
use dualres_core::decision::{decide, decide_at, posterior_m, posterior_m_matrix, threshold_for_count, DecisionParams, Reading};
use dualres_core::diagnostics::{ess_voxels, fraction_at_most, gelman_rubin_voxels, median};
use dualres_core::hmc::{HmcConfig, PosteriorDraws};
use dualres_core::io::{read_matrix, write_draws, write_telemetry};
use dualres_core::methods::{Method, MethodContext};
use dualres_core::nifti::{read_nifti, read_nifti_with_mask, write_nifti, SampleType};
use dualres_core::simulation::{roc, run_sweep_with, write_roc, KernelKind, SimConfig, SimDesign, DEFAULT_DISCOVERIES};
use dualres_core::{EmbeddingOptions, KernelParams, MaskedVolume};
use log::{info, warn};

use crate::config::{pick, FileConfig, ThetaFile};
use crate::{Cli, CliError, Command, EstimateArgs, FitArgs, SimulateArgs, ThresholdArgs};

/// Gelman-Rubin bound below which a voxel counts as converged.
const RHAT_BOUND: f64 = 1.03;

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::EstimateKernel(a) => estimate(a, &file),
        Command::Fit(a) => fit(a, &file),
        Command::Threshold(a) => threshold(a, &file),
        Command::Simulate(a) => simulate(a, &file),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn read_volume(path: &Path, mask: Option<&Path>) -> CliResult<MaskedVolume> {
    Ok(match mask {
        Some(m) => read_nifti_with_mask(path, m)?,
        None => read_nifti(path)?,
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "on" | "true" | "1" | "yes" => Some(true),
        "off" | "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn estimate_options(
    fix_nu: Option<f64>,
    psi_le_nu: bool,
    nugget: bool,
    n0: Option<usize>,
    n1: Option<usize>,
    max_evals: Option<usize>,
) -> EstimateOptions {
    let d = EstimateOptions::default();
    let mut mce = fix_nu.map_or_else(MceOptions::default, MceOptions::fixed_nu);
    mce.psi_le_nu = psi_le_nu;
    mce.nugget = nugget;
    mce.max_evals = max_evals.unwrap_or(mce.max_evals);
    EstimateOptions {
        n0: n0.unwrap_or(d.n0),
        n1: n1.unwrap_or(d.n1),
        mce,
    }
}

fn estimate(a: EstimateArgs, file: &FileConfig) -> CliResult {
    let input = a
        .input
        .or_else(|| file.input.clone())
        .ok_or_else(|| usage("estimate-kernel needs --in"))?;
    let mut psi_le_nu = file.psi_le_nu.unwrap_or(true);
    for c in &a.constraints {
        match c.split_once('=') {
            Some(("psi-le-nu", v)) => {
                psi_le_nu = parse_bool(v).ok_or_else(|| usage(format!("constraint value must be on or off, got '{v}'")))?;
            }
            _ => return Err(usage(format!("unknown constraint '{c}' (expected psi-le-nu=on|off)"))),
        }
    }
    let vol = read_volume(&input, a.mask.as_deref().or(file.mask.as_deref()))?;
    let opts = estimate_options(
        a.fix_nu.or(file.fix_nu),
        psi_le_nu,
        a.nugget || file.nugget.unwrap_or(false),
        a.n0.or(file.n0),
        a.n1.or(file.n1),
        a.max_evals.or(file.max_evals),
    );
    let (fit, summary) = estimate_kernel(&vol, &opts)?;
    let p = fit.params;
    info!(
        "kernel: tau_sq={:.6} psi={:.6} nu={:.4} fwhm={:.3} mm (objective {:.4e}, {} evaluations{})",
        p.tau_sq,
        p.psi,
        p.nu,
        p.fwhm(),
        fit.objective,
        fit.evaluations,
        if fit.converged { "" } else { ", not converged" }
    );
    ThetaFile {
        tau_sq: p.tau_sq,
        psi: p.psi,
        nu: p.nu,
        fwhm_mm: Some(p.fwhm()),
        nugget: fit.nugget,
        objective: Some(fit.objective),
        converged: Some(fit.converged),
    }
    .write(&a.out)?;
    let dir = a.out.parent().map_or_else(PathBuf::new, Path::to_path_buf);
    let cov_path = a.covariogram.unwrap_or_else(|| dir.join("covariogram.csv"));
    let curve_path = a.curve.unwrap_or_else(|| dir.join("kernel_fit.csv"));
    summary.write_csv(&cov_path)?;
    let max_d = summary.distances.iter().copied().fold(0.0, f64::max);
    write_fit_curve(&p, max_d, 200, &curve_path)?;
    info!("wrote {}, {} and {}", a.out.display(), cov_path.display(), curve_path.display());
    Ok(())
}

/// Resolves the kernel from exactly one of a parameter file, inline values
/// or an estimation volume.
fn fit_kernel(a: &FitArgs, file: &FileConfig) -> CliResult<KernelParams> {
    let theta = a.theta.clone().or_else(|| file.theta.clone());
    let inline = [a.tau_sq.or(file.tau_sq), a.psi.or(file.psi), a.nu.or(file.nu)];
    let from = a.estimate_from.clone().or_else(|| file.estimate_from.clone());
    let n_inline = inline.iter().flatten().count();
    if n_inline != 0 && n_inline != 3 {
        return Err(usage("--tau-sq, --psi and --nu must be given together"));
    }
    let sources = usize::from(theta.is_some()) + usize::from(n_inline == 3) + usize::from(from.is_some());
    if sources != 1 {
        return Err(usage(
            "give exactly one kernel source: --theta, inline --tau-sq/--psi/--nu, or --estimate-from",
        ));
    }
    if let Some(t) = theta {
        return ThetaFile::read(&t);
    }
    if let [Some(t), Some(p), Some(n)] = inline {
        return Ok(KernelParams::new(t, p, n)?);
    }
    let from = from.expect("one source is present");
    let vol = read_nifti(&from)?;
    let (fit, _) = estimate_kernel(&vol, &estimate_options(Some(1.0), true, false, None, None, None))?;
    info!(
        "kernel estimated from {}: tau_sq={:.6} psi={:.6} nu={:.4}",
        from.display(),
        fit.params.tau_sq,
        fit.params.psi,
        fit.params.nu
    );
    Ok(fit.params)
}

fn hmc_config(
    chains: Option<usize>,
    total: Option<usize>,
    warmup: Option<usize>,
    thin: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    file: &FileConfig,
    defaults: (usize, usize, usize, usize, usize),
) -> CliResult<HmcConfig> {
    let (d_chains, d_total, d_warmup, d_thin, d_steps) = defaults;
    let total = pick(total, file.iterations, d_total);
    let warmup = pick(warmup, file.warmup, d_warmup);
    if total <= warmup {
        return Err(usage(format!("--iters ({total}) must exceed --warmup ({warmup})")));
    }
    let config = HmcConfig {
        chains: pick(chains, file.chains, d_chains),
        iterations: total - warmup,
        warmup,
        thin: pick(thin, file.thin, d_thin),
        leapfrog_steps: pick(steps, file.leapfrog_steps, d_steps),
        seed: pick(seed, file.seed, 0),
        ..HmcConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn fit(a: FitArgs, file: &FileConfig) -> CliResult {
    let mode: Method = a
        .mode
        .clone()
        .or_else(|| file.mode.clone())
        .ok_or_else(|| usage("fit needs --mode"))?
        .parse()?;
    let high_path = a.high.clone().or_else(|| file.high.clone()).ok_or_else(|| usage("fit needs --high"))?;
    let high = read_volume(&high_path, a.high_mask.as_deref().or(file.high_mask.as_deref()))?;
    let std = match a.std.clone().or_else(|| file.std.clone()) {
        Some(p) => Some(read_volume(&p, a.std_mask.as_deref().or(file.std_mask.as_deref()))?),
        None if mode.needs_std() => return Err(usage(format!("mode {mode} needs --std"))),
        None => None,
    };
    let params = fit_kernel(&a, file)?;
    let radius = a.radius.or(file.radius).unwrap_or_else(|| params.fwhm());
    let config = hmc_config(
        a.chains,
        a.iterations,
        a.warmup,
        a.thin,
        a.leapfrog_steps,
        a.seed,
        file,
        (3, 4000, 1000, 3, 25),
    )?;
    let opts = EmbeddingOptions {
        allow_extend: a.allow_extend || file.allow_extend.unwrap_or(false),
        allow_clamp: a.allow_clamp || file.allow_clamp.unwrap_or(false),
    };
    let out = a.out_dir.clone().or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;

    info!(
        "fitting {mode}: {} high-res voxels{}, r={radius:.3} mm, {} chains x {} iterations ({} warmup)",
        high.n_masked(),
        std.as_ref().map_or(String::new(), |s| format!(", {} standard-res voxels", s.n_masked())),
        config.chains,
        config.warmup + config.iterations,
        config.warmup
    );
    let ctx = MethodContext::new(&high, std.as_ref().filter(|_| mode.needs_std()), params, radius, opts)?;
    let y_h = high.masked_values();
    let y_s = std.as_ref().map(MaskedVolume::masked_values);
    let result = ctx.fit(mode, Some(&y_h), None, y_s.as_deref(), &config)?;
    for (c, msg) in &result.failed {
        warn!("chain {c} excluded: {msg}");
    }

    let stats = posterior_m(&result.chains, Reading::MonteCarlo)?;
    write_nifti(&high.with_masked_values(&stats.mean)?, &out.join("posterior_mean.nii"), SampleType::Float32)?;
    write_nifti(&high.with_masked_values(&stats.sd)?, &out.join("posterior_sd.nii"), SampleType::Float32)?;
    write_nifti(
        &high.with_masked_values(&vec![1.0; high.n_masked()])?,
        &out.join("mask.nii"),
        SampleType::Float32,
    )?;
    for d in &result.chains {
        write_draws(d, &out.join(format!("draws_chain{}.bin", d.chain)))?;
        write_telemetry(d, &out.join(format!("telemetry_chain{}.csv", d.chain)))?;
        info!(
            "chain {}: step size {:.4e}, mean acceptance {:.3}, restriction rate {:.3}",
            d.chain,
            d.step_size,
            d.mean_accept(),
            d.restriction_rate()
        );
    }
    write_diagnostics(&result.chains, &stats.mean, &stats.sd, &out.join("diagnostics.csv"))?;
    info!("wrote outputs to {}", out.display());
    Ok(())
}

fn write_diagnostics(chains: &[PosteriorDraws], mean: &[f64], sd: &[f64], path: &Path) -> CliResult {
    let rhat = gelman_rubin_voxels(chains);
    let ess = ess_voxels(chains);
    let flagged: Vec<usize> = rhat
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.is_some_and(|r| r > RHAT_BOUND).then_some(i))
        .collect();
    if chains.len() > 1 {
        info!(
            "Gelman-Rubin <= {RHAT_BOUND}: {:.2}% of voxels; {} flagged",
            100.0 * fraction_at_most(&rhat, RHAT_BOUND),
            flagged.len()
        );
        if let Some(&first) = flagged.first() {
            warn!("unconverged voxels (first ordinal {first}); see {}", path.display());
        }
    } else {
        info!("single chain: Gelman-Rubin not computed");
    }
    if let Some(m) = median(&ess) {
        info!("median effective sample size {m:.1}");
    }
    let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut body = String::from("voxel,mean,sd,rhat,ess,flagged\n");
    for i in 0..mean.len() {
        body.push_str(&format!(
            "{i},{:.8e},{:.8e},{},{},{}\n",
            mean[i],
            sd[i],
            fmt(rhat[i]),
            fmt(ess[i]),
            u8::from(rhat[i].is_some_and(|r| r > RHAT_BOUND))
        ));
    }
    fs::write(path, body).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn threshold(a: ThresholdArgs, file: &FileConfig) -> CliResult {
    let dir = a.fit_dir.or_else(|| file.fit_dir.clone()).ok_or_else(|| usage("threshold needs --fit-dir"))?;
    let loss = [a.k1.or(file.k1), a.k2.or(file.k2), a.t.or(file.t)];
    let count = a.n_discoveries.or(file.n_discoveries);
    let n_loss = loss.iter().flatten().count();
    if count.is_some() && n_loss > 0 {
        return Err(usage("give either --k1/--k2/--t or --n-discoveries, not both"));
    }
    if count.is_none() && n_loss != 3 {
        return Err(usage("give all of --k1, --k2 and --t, or --n-discoveries"));
    }
    let reading = match a.reading.or_else(|| file.reading.clone()).as_deref() {
        None | Some("mc") => Reading::MonteCarlo,
        Some("plugin") => Reading::PlugIn,
        Some(r) => return Err(usage(format!("unknown reading '{r}' (expected mc or plugin)"))),
    };
    let out = a.out_dir.or_else(|| file.out_dir.clone()).unwrap_or_else(|| dir.clone());
    create_dir(&out)?;

    let mask = read_nifti(&dir.join("mask.nii"))?;
    let mut draw_files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("draws_chain") && n.ends_with(".bin"))
        })
        .collect();
    draw_files.sort();
    if draw_files.is_empty() {
        return Err(usage(format!("no draws_chain*.bin files in {}", dir.display())));
    }
    let mut pooled = Vec::new();
    for p in &draw_files {
        let (_, cols, values) = read_matrix(p)?;
        if cols != mask.n_masked() {
            return Err(usage(format!(
                "{} has {cols} voxels but the mask has {}",
                p.display(),
                mask.n_masked()
            )));
        }
        pooled.extend(values);
    }
    let stats = posterior_m_matrix(&pooled, mask.n_masked(), reading)?;
    if !stats.undefined.is_empty() {
        warn!("{} voxels have zero posterior sd; their f_bar is 0", stats.undefined.len());
    }
    let summary = match (count, loss) {
        (Some(n), _) => {
            let (th, achieved) = threshold_for_count(&stats.f_bar, n)?;
            info!("requested {n} discoveries, achieved {achieved} at threshold {th:.6}");
            decide_at(&stats, th)
        }
        (None, [Some(k1), Some(k2), Some(t)]) => {
            let p = DecisionParams::new(k1, k2, t)?;
            let s = decide(&stats, &p);
            info!("threshold {:.6} (k1={k1}, k2={k2}, t={t}): {} discoveries", p.threshold(), s.n_discoveries());
            s
        }
        _ => unreachable!("flag combinations checked above"),
    };
    let delta: Vec<f64> = summary.delta.iter().map(|&d| f64::from(u8::from(d))).collect();
    write_nifti(&mask.with_masked_values(&summary.f_bar)?, &out.join("f_bar.nii"), SampleType::Float32)?;
    write_nifti(&mask.with_masked_values(&summary.m)?, &out.join("m.nii"), SampleType::Float32)?;
    write_nifti(&mask.with_masked_values(&delta)?, &out.join("delta.nii"), SampleType::Float32)?;
    let mut body = String::from("voxel,f_bar,m,delta\n");
    for (i, ((f, m), d)) in summary.f_bar.iter().zip(&summary.m).zip(&summary.delta).enumerate() {
        body.push_str(&format!("{i},{f:.8},{m:.8},{}\n", u8::from(*d)));
    }
    let csv = out.join("decisions.csv");
    fs::write(&csv, body).map_err(|e| usage(format!("cannot write {}: {e}", csv.display())))?;
    info!("wrote decisions to {}", out.display());
    Ok(())
}

fn list<T: std::str::FromStr>(flag: Option<String>, file: Option<String>, default: &str, what: &str) -> CliResult<Vec<T>> {
    let text = flag.or(file).unwrap_or_else(|| default.to_string());
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse().map_err(|_| usage(format!("invalid {what} '{s}'")))
        })
        .collect()
}

fn simulate(a: SimulateArgs, file: &FileConfig) -> CliResult {
    let kernels: Vec<KernelKind> = list(a.kernel, file.kernel.clone(), "exponential,gaussian", "kernel")?;
    let snrs: Vec<f64> = list(a.snr_h, file.snr_h.map(|v| v.to_string()), "0.1", "SNR")?;
    let ratios: Vec<f64> = list(a.ratio, file.ratio.map(|v| v.to_string()), "1,2", "SNR ratio")?;
    let replicates = pick(a.replicates, file.replicates, 5);
    let seed = pick(a.seed, file.seed, 0);
    // Sweeps fit four methods per replicate, so the sampler defaults are
    // shorter than for `fit`.
    let hmc = hmc_config(
        a.chains,
        a.iterations,
        a.warmup,
        a.thin,
        a.leapfrog_steps,
        Some(seed),
        file,
        (1, 600, 300, 2, 25),
    )?;
    let config = SimConfig {
        hmc,
        n_discoveries: pick(a.n_discoveries, file.n_discoveries, DEFAULT_DISCOVERIES),
        ..SimConfig::default()
    };
    let out = a.out_dir.or_else(|| file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;
    let mut designs = Vec::new();
    for &k in &kernels {
        for &s in &snrs {
            for &r in &ratios {
                if !(s > 0.0 && r > 0.0) {
                    return Err(usage(format!("SNR values must be positive, got snr_h={s}, ratio={r}")));
                }
                designs.push(SimDesign::new(k, s, r));
            }
        }
    }
    info!(
        "simulating {} cells x {replicates} replicates ({} iterations per chain)",
        designs.len(),
        config.hmc.warmup + config.hmc.iterations
    );
    let roc_dir = out.clone();
    let table = run_sweep_with(&designs, replicates, &config, seed, |design, rep, truth, fit| {
        if rep != 0 {
            return Ok(());
        }
        let stats = posterior_m(&fit.chains, Reading::MonteCarlo)?;
        let name = format!(
            "roc_{}_snr{}_ratio{}_{}.csv",
            design.kernel.name(),
            design.snr_h,
            design.snr_ratio,
            fit.method
        );
        write_roc(&roc(&stats.f_bar, &truth.active), &roc_dir.join(name))
    })?;
    let path = out.join("table.csv");
    table.write_csv(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}
