//! Hamiltonian Monte Carlo with a circulant mass matrix, dual-averaging
//! step-size adaptation and Gibbs updates for the noise variances.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::circulant::ComplexField;
use crate::error::{Error, Result};
use crate::posterior::{ModelState, Posterior};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub warmup: usize,
    /// Post-warmup iterations per chain.
    pub iterations: usize,
    pub thin: usize,
    /// Post-warmup step sizes are uniform on `[lo, hi] * eps0`.
    pub jitter: (f64, f64),
    pub chains: usize,
    pub seed: u64,
    /// Starting step size; found by a doubling search when absent.
    pub initial_step: Option<f64>,
    /// Hold the noise variances at their starting values.
    pub fixed_sigmas: bool,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 25,
            target_accept: 0.65,
            warmup: 1000,
            iterations: 3000,
            thin: 3,
            jitter: (0.9, 1.1),
            chains: 3,
            seed: 0,
            initial_step: None,
            fixed_sigmas: false,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.leapfrog_steps == 0 {
            return bad("leapfrog steps must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if self.warmup == 0 || self.iterations == 0 || self.thin == 0 || self.chains == 0 {
            return bad("warmup, iterations, thin and chains must all be at least 1");
        }
        if !(self.jitter.0 > 0.0 && self.jitter.0 <= self.jitter.1) {
            return bad("jitter band must satisfy 0 < lo <= hi");
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        self.iterations / self.thin
    }
}

/// Nesterov dual averaging of `log eps` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;
    const LOG_MIN: f64 = -18.420_680_743_952_367; // ln 1e-8
    const LOG_MAX: f64 = 6.907_755_278_982_137; // ln 1e3

    pub fn new(eps0: f64, target: f64) -> Self {
        let l = eps0.ln().clamp(Self::LOG_MIN, Self::LOG_MAX);
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            h_bar: 0.0,
            log_eps: l,
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    /// Current step size.
    pub fn step(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Averaged step size, used once warmup ends.
    pub fn final_step(&self) -> f64 {
        if self.t == 0.0 {
            self.step()
        } else {
            self.log_eps_bar.exp()
        }
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let t = self.t;
        let eta = 1.0 / (t + Self::T0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        self.log_eps = (self.mu - t.sqrt() / Self::GAMMA * self.h_bar).clamp(Self::LOG_MIN, Self::LOG_MAX);
        let w = t.powf(-Self::KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.step()
    }
}

/// Runs dual averaging over a recorded sequence of acceptance statistics and
/// returns the averaged step size.
pub fn warmup_step_size(history: &[f64], eps_init: f64, target: f64) -> f64 {
    let mut da = DualAveraging::new(eps_init, target);
    for &a in history {
        da.update(a);
    }
    da.final_step()
}

/// Outcome of one HMC transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcStep {
    pub accepted: bool,
    pub accept_prob: f64,
    /// Hamiltonian at the start of the trajectory.
    pub energy: f64,
    /// `H_new - H`, infinite when the trajectory diverged.
    pub energy_error: f64,
}

/// Reusable buffers for one chain.
///
/// Within a trajectory the field and momentum are carried as unnormalized
/// DFTs, so each leapfrog step costs one inverse transform (to read the
/// field at brain voxels) and one forward transform (of the data gradient).
#[derive(Debug, Default)]
pub struct Workspace {
    u_hat: Vec<Complex64>,
    p_hat: Vec<Complex64>,
    g_hat: Vec<Complex64>,
    field: Vec<Complex64>,
    mu: Vec<f64>,
    data_grad: Vec<f64>,
    mass: Vec<f64>,
}

/// Draws the DFT of a momentum `p ~ N(0, M)` in both real and imaginary
/// parts: `p_hat = sqrt(N * lambda_M) z`.
fn sample_momentum_hat<R: Rng + ?Sized>(mass: &[f64], p_hat: &mut Vec<Complex64>, rng: &mut R) {
    let n = mass.len() as f64;
    p_hat.clear();
    p_hat.extend(mass.iter().map(|&m| {
        let s = (n * m).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re * s, im * s)
    }));
}

/// `(1/N) sum_k g_k |x_k|^2`, compensated.
fn spectral_sum(x: &[Complex64], g: impl Fn(usize) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (k, v) in x.iter().enumerate() {
        let y = g(k) * v.norm_sqr() - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / x.len() as f64
}

/// `1/2 p^H M^-1 p` from the momentum's DFT.
fn kinetic(mass: &[f64], p_hat: &[Complex64]) -> f64 {
    0.5 * spectral_sum(p_hat, |k| 1.0 / mass[k])
}

/// Log posterior at the field whose DFT is `ws.u_hat`. Leaves the field in
/// `ws.field` and the DFT of the gradient in `ws.g_hat`.
fn evaluate(post: &Posterior, state: &ModelState, ws: &mut Workspace) -> f64 {
    let emb = post.emb;
    let fft = emb.fft();
    let lam = &emb.eigvals;
    ws.field.clear();
    ws.field.extend_from_slice(&ws.u_hat);
    fft.inverse(&mut ws.field);
    let quad = spectral_sum(&ws.u_hat, |k| 1.0 / lam[k]);
    ws.mu.clear();
    ws.mu.extend(emb.brain_index_map.iter().map(|&e| ws.field[e].re));
    ws.data_grad.resize(ws.mu.len(), 0.0);
    let data = post.data_part(&ws.mu, state.sigma_h_sq, state.sigma_s_sq, &mut ws.data_grad);
    ws.g_hat.clear();
    ws.g_hat.resize(emb.len(), Complex64::new(0.0, 0.0));
    for (&e, &g) in emb.brain_index_map.iter().zip(&ws.data_grad) {
        ws.g_hat[e].re = g;
    }
    fft.forward(&mut ws.g_hat);
    for (g, (u, &l)) in ws.g_hat.iter_mut().zip(ws.u_hat.iter().zip(lam)) {
        *g -= u / l;
    }
    data - 0.5 * quad
}

/// `steps` leapfrog steps from the point in `ws`, whose gradient must be
/// current. Returns the final log posterior; `ws.field` then holds the end
/// point in real space.
fn leapfrog(post: &Posterior, state: &ModelState, eps: f64, steps: usize, ws: &mut Workspace) -> f64 {
    let mut logp = f64::NAN;
    for (p, g) in ws.p_hat.iter_mut().zip(&ws.g_hat) {
        *p += g * (0.5 * eps);
    }
    for step in 0..steps {
        for ((u, p), &m) in ws.u_hat.iter_mut().zip(&ws.p_hat).zip(&ws.mass) {
            *u += p * (eps / m);
        }
        logp = evaluate(post, state, ws);
        if !logp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let w = if step + 1 == steps { 0.5 * eps } else { eps };
        for (p, g) in ws.p_hat.iter_mut().zip(&ws.g_hat) {
            *p += g * w;
        }
    }
    logp
}

/// One HMC transition of `state.u` with noise variances held fixed.
pub fn hmc_update<R: Rng + ?Sized>(
    post: &Posterior,
    state: &mut ModelState,
    eps: f64,
    steps: usize,
    rng: &mut R,
    ws: &mut Workspace,
) -> HmcStep {
    post.mass_eigvals(state, &mut ws.mass);
    sample_momentum_hat(&ws.mass, &mut ws.p_hat, rng);
    ws.u_hat.clear();
    ws.u_hat.extend_from_slice(&state.u.values);
    post.emb.fft().forward(&mut ws.u_hat);
    let logp0 = evaluate(post, state, ws);
    let h0 = -logp0 + kinetic(&ws.mass, &ws.p_hat);
    let logp1 = leapfrog(post, state, eps, steps, ws);
    let h1 = -logp1 + kinetic(&ws.mass, &ws.p_hat);
    let diff = h1 - h0;
    let (accept_prob, energy_error) = if diff.is_finite() && h0.is_finite() {
        ((-diff).exp().min(1.0), diff)
    } else {
        (0.0, f64::INFINITY)
    };
    let accepted = rng.random::<f64>() < accept_prob;
    if accepted {
        state.u.values.copy_from_slice(&ws.field);
    }
    HmcStep {
        accepted,
        accept_prob,
        energy: h0,
        energy_error,
    }
}

/// Integrates `steps` leapfrog steps from `state.u` with real-space momentum
/// `p`. Returns the end point, the end momentum and `H_new - H`.
pub fn integrate(
    post: &Posterior,
    state: &ModelState,
    p: &ComplexField,
    eps: f64,
    steps: usize,
) -> (ModelState, ComplexField, f64) {
    let fft = post.emb.fft();
    let mut ws = Workspace::default();
    post.mass_eigvals(state, &mut ws.mass);
    ws.p_hat = p.values.clone();
    fft.forward(&mut ws.p_hat);
    ws.u_hat = state.u.values.clone();
    fft.forward(&mut ws.u_hat);
    let h0 = -evaluate(post, state, &mut ws) + kinetic(&ws.mass, &ws.p_hat);
    let logp1 = leapfrog(post, state, eps, steps, &mut ws);
    let h1 = -logp1 + kinetic(&ws.mass, &ws.p_hat);
    let mut end = state.clone();
    end.u.values.copy_from_slice(&ws.field);
    let mut p_end = ws.p_hat;
    fft.inverse(&mut p_end);
    (end, ComplexField { values: p_end }, h1 - h0)
}

/// Real-space momentum draw `p ~ N(0, M)`, for integrator checks.
pub fn sample_momentum<R: Rng + ?Sized>(post: &Posterior, state: &ModelState, rng: &mut R) -> ComplexField {
    let mut mass = Vec::new();
    post.mass_eigvals(state, &mut mass);
    let mut p = Vec::new();
    sample_momentum_hat(&mass, &mut p, rng);
    post.emb.fft().inverse(&mut p);
    ComplexField { values: p }
}

/// Doubles or halves a trial step until the one-step acceptance crosses 1/2.
fn find_initial_step<R: Rng + ?Sized>(post: &Posterior, state: &ModelState, rng: &mut R) -> f64 {
    let mut ws = Workspace::default();
    let trial = |eps: f64, ws: &mut Workspace, rng: &mut R| {
        let mut s = state.clone();
        hmc_update(post, &mut s, eps, 1, rng, ws).accept_prob
    };
    let mut eps = 1.0;
    let up = trial(eps, &mut ws, rng) > 0.5;
    for _ in 0..60 {
        let a = trial(eps, &mut ws, rng);
        if up && a <= 0.5 {
            return eps / 2.0;
        }
        if !up && a > 0.5 {
            return eps;
        }
        eps = if up { eps * 2.0 } else { eps / 2.0 };
    }
    eps
}

/// Per-iteration sampler telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub warmup: bool,
    pub eps: f64,
    pub accept_prob: f64,
    pub accepted: bool,
    pub energy: f64,
    pub sigma_h_sq: f64,
    pub sigma_s_sq: f64,
    pub restriction_ok: bool,
}

/// Kept draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub chain: usize,
    pub n_voxels: usize,
    /// Row-major `(kept draws) x (masked voxels)` matrix of `Re(mu_h)`.
    pub mu: Vec<f64>,
    pub sigma_h_sq: Vec<f64>,
    pub sigma_s_sq: Vec<f64>,
    pub accept_prob: Vec<f64>,
    pub restriction_ok: Vec<bool>,
    /// Every iteration, warmup included.
    pub telemetry: Vec<IterationRecord>,
    /// Step size `eps0` frozen at the end of warmup.
    pub step_size: f64,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.sigma_h_sq.len()
    }

    pub fn row(&self, g: usize) -> &[f64] {
        &self.mu[g * self.n_voxels..(g + 1) * self.n_voxels]
    }

    /// Trace of one voxel across kept draws.
    pub fn voxel(&self, i: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|g| self.mu[g * self.n_voxels + i]).collect()
    }

    /// Mean acceptance statistic over post-warmup iterations.
    pub fn mean_accept(&self) -> f64 {
        let post: Vec<f64> = self
            .telemetry
            .iter()
            .filter(|r| !r.warmup)
            .map(|r| r.accept_prob)
            .collect();
        post.iter().sum::<f64>() / post.len().max(1) as f64
    }

    /// Fraction of post-warmup iterations satisfying the variance order.
    pub fn restriction_rate(&self) -> f64 {
        let post: Vec<bool> = self
            .telemetry
            .iter()
            .filter(|r| !r.warmup)
            .map(|r| r.restriction_ok)
            .collect();
        post.iter().filter(|&&b| b).count() as f64 / post.len().max(1) as f64
    }

    /// Drops kept draws whose variances violate the order restriction.
    pub fn filter_restriction(&self) -> PosteriorDraws {
        let keep: Vec<usize> = (0..self.n_draws()).filter(|&g| self.restriction_ok[g]).collect();
        let mut out = self.clone();
        out.mu = keep.iter().flat_map(|&g| self.row(g).iter().copied()).collect();
        out.sigma_h_sq = keep.iter().map(|&g| self.sigma_h_sq[g]).collect();
        out.sigma_s_sq = keep.iter().map(|&g| self.sigma_s_sq[g]).collect();
        out.accept_prob = keep.iter().map(|&g| self.accept_prob[g]).collect();
        out.restriction_ok = vec![true; keep.len()];
        out
    }
}

/// Runs one chain from `init` with the chain's own random stream.
pub fn run_chain(post: &Posterior, init: ModelState, config: &HmcConfig, chain: usize) -> Result<PosteriorDraws> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[rng::CHAINS, chain as u64]);
    let mut state = init;
    let mut ws = Workspace::default();
    let eps_init = config
        .initial_step
        .unwrap_or_else(|| find_initial_step(post, &state, &mut rng));
    let mut da = DualAveraging::new(eps_init, config.target_accept);
    let n_vox = post.emb.n_brain();
    let kept = config.kept_per_chain();
    let mut draws = PosteriorDraws {
        chain,
        n_voxels: n_vox,
        mu: Vec::with_capacity(kept * n_vox),
        sigma_h_sq: Vec::with_capacity(kept),
        sigma_s_sq: Vec::with_capacity(kept),
        accept_prob: Vec::with_capacity(kept),
        restriction_ok: Vec::with_capacity(kept),
        telemetry: Vec::with_capacity(config.warmup + config.iterations),
        step_size: eps_init,
    };
    let mut eps0 = eps_init;
    for it in 0..config.warmup + config.iterations {
        let warm = it < config.warmup;
        if !config.fixed_sigmas {
            let (sh, ss) = post.update_sigmas(&state, &mut rng)?;
            state.sigma_h_sq = sh;
            state.sigma_s_sq = ss;
        }
        let eps = if warm {
            da.step()
        } else {
            eps0 * rng.random_range(config.jitter.0..=config.jitter.1)
        };
        let step = hmc_update(post, &mut state, eps, config.leapfrog_steps, &mut rng, &mut ws);
        if warm {
            da.update(step.accept_prob);
            if it + 1 == config.warmup {
                eps0 = da.final_step();
                draws.step_size = eps0;
            }
        }
        let ok = state.restriction_ok(post.data);
        draws.telemetry.push(IterationRecord {
            iteration: it,
            warmup: warm,
            eps,
            accept_prob: step.accept_prob,
            accepted: step.accepted,
            energy: step.energy,
            sigma_h_sq: state.sigma_h_sq,
            sigma_s_sq: state.sigma_s_sq,
            restriction_ok: ok,
        });
        if !warm {
            let t = it - config.warmup;
            if (t + 1) % config.thin == 0 && draws.n_draws() < kept {
                draws.mu.extend(post.emb.restrict(&state.u));
                draws.sigma_h_sq.push(state.sigma_h_sq);
                draws.sigma_s_sq.push(state.sigma_s_sq);
                draws.accept_prob.push(step.accept_prob);
                draws.restriction_ok.push(ok);
            }
        }
    }
    Ok(draws)
}

/// Runs `config.chains` independent chains in parallel from the model's
/// default starting state. A failing chain reports its own error.
pub fn run_chains(post: &Posterior, config: &HmcConfig) -> Result<Vec<Result<PosteriorDraws>>> {
    config.validate()?;
    let init = post.initial_state()?;
    Ok((0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(post, init.clone(), config, c))
        .collect())
}

/// Runs the chains and fails if any chain failed.
pub fn run_chains_all(post: &Posterior, config: &HmcConfig) -> Result<Vec<PosteriorDraws>> {
    run_chains(post, config)?.into_iter().collect()
}
