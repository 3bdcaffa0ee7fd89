//! Joint Gaussian model over the embedded field and its log posterior.
//!
//! The latent field `u` lives on the extended torus; its real part at the
//! masked high-resolution voxels is the mean `mu_h`. Observations enter as a
//! direct image on those voxels (variance `sigma_h_sq`) and optionally as a
//! coarse image `W mu_h` (variance `sigma_s_sq`). Noise variances carry the
//! prior `1 / sigma^2`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::circulant::{CirculantEmbedding, ComplexField};
use crate::error::{Error, Result};
use crate::kriging::KrigingWeights;

/// An image observed directly on the masked voxels of the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectData {
    pub values: Vec<f64>,
    /// Voxels excluded from the likelihood are `false`.
    pub observed: Vec<bool>,
}

impl DirectData {
    pub fn full(values: Vec<f64>) -> Self {
        let observed = vec![true; values.len()];
        Self { values, observed }
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// An image observed through kriging weights, `Y = W mu + noise`.
#[derive(Debug, Clone)]
pub struct ProjectedData {
    pub values: Vec<f64>,
    pub weights: Arc<KrigingWeights>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelData {
    pub direct: Option<DirectData>,
    pub projected: Option<ProjectedData>,
}

/// Latent field and noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub u: ComplexField,
    pub sigma_h_sq: f64,
    pub sigma_s_sq: f64,
}

impl ModelState {
    /// `sigma_h_sq > sigma_s_sq`, or true when only one image is modeled.
    pub fn restriction_ok(&self, data: &ModelData) -> bool {
        data.direct.is_none() || data.projected.is_none() || self.sigma_h_sq > self.sigma_s_sq
    }
}

/// Residual sums of squares and observation counts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub ssr_h: f64,
    pub n_h: usize,
    pub ssr_s: f64,
    pub n_s: usize,
}

/// Log posterior of a [`ModelData`] under a fixed embedding.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a> {
    pub emb: &'a CirculantEmbedding,
    pub data: &'a ModelData,
}

impl<'a> Posterior<'a> {
    pub fn new(emb: &'a CirculantEmbedding, data: &'a ModelData) -> Result<Self> {
        let n = emb.n_brain();
        if let Some(d) = &data.direct {
            if d.values.len() != n || d.observed.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "direct image has {} values and {} flags for {n} brain voxels",
                    d.values.len(),
                    d.observed.len()
                )));
            }
            if let Some(i) = (0..n).find(|&i| d.observed[i] && !d.values[i].is_finite()) {
                return Err(Error::NonFiniteData(i));
            }
        }
        if let Some(p) = &data.projected {
            if p.weights.n_cols != n || p.weights.n_rows != p.values.len() {
                return Err(Error::DimensionMismatch(format!(
                    "W is {}x{} but there are {} coarse values and {n} brain voxels",
                    p.weights.n_rows,
                    p.weights.n_cols,
                    p.values.len()
                )));
            }
            if let Some(i) = p.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteData(i));
            }
        }
        Ok(Self { emb, data })
    }

    pub fn residuals(&self, mu: &[f64]) -> Residuals {
        let mut r = Residuals::default();
        if let Some(d) = &self.data.direct {
            for i in 0..mu.len() {
                if d.observed[i] {
                    let e = d.values[i] - mu[i];
                    r.ssr_h += e * e;
                    r.n_h += 1;
                }
            }
        }
        if let Some(p) = &self.data.projected {
            let wmu = p.weights.apply(mu).expect("dimensions checked at construction");
            r.ssr_s = p.values.iter().zip(&wmu).map(|(y, m)| (y - m) * (y - m)).sum();
            r.n_s = p.values.len();
        }
        r
    }

    /// Noise-variance part of the log posterior.
    fn noise_terms(&self, r: &Residuals, sigma_h_sq: f64, sigma_s_sq: f64) -> f64 {
        let mut v = 0.0;
        if self.data.direct.is_some() {
            v -= r.ssr_h / (2.0 * sigma_h_sq) + (r.n_h as f64 / 2.0 + 1.0) * sigma_h_sq.ln();
        }
        if self.data.projected.is_some() {
            v -= r.ssr_s / (2.0 * sigma_s_sq) + (r.n_s as f64 / 2.0 + 1.0) * sigma_s_sq.ln();
        }
        v
    }

    pub fn log_posterior(&self, state: &ModelState) -> Result<f64> {
        let mut scratch = Vec::new();
        let v = self.value_and_grad(state, &mut scratch, None);
        finite(v, "log posterior")
    }

    /// Gradient with respect to `(Re u, Im u)`, packed as a complex field.
    pub fn grad_u(&self, state: &ModelState) -> Result<ComplexField> {
        let mut scratch = Vec::new();
        let mut g = Vec::new();
        let v = self.value_and_grad(state, &mut scratch, Some(&mut g));
        finite(v, "log posterior")?;
        let g = ComplexField { values: g };
        if !g.is_finite() {
            return Err(Error::NonFinite("log posterior gradient".into()));
        }
        Ok(g)
    }

    /// Log posterior, and its gradient into `grad` when requested. One FFT
    /// pair serves both the quadratic form and `C^-1 u`.
    pub(crate) fn value_and_grad(
        &self,
        state: &ModelState,
        scratch: &mut Vec<Complex64>,
        grad: Option<&mut Vec<Complex64>>,
    ) -> f64 {
        let emb = self.emb;
        let n = emb.len();
        scratch.clear();
        scratch.extend_from_slice(&state.u.values);
        let fft = emb.fft();
        fft.forward(scratch);
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (v, &lam) in scratch.iter_mut().zip(&emb.eigvals) {
            let y = v.norm_sqr() / lam - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            *v /= lam;
        }
        let quad = sum / n as f64;

        let mu = emb.restrict(&state.u);
        let mut data_grad = vec![0.0; mu.len()];
        let data = self.data_part(&mu, state.sigma_h_sq, state.sigma_s_sq, &mut data_grad);
        if let Some(grad) = grad {
            fft.inverse(scratch);
            grad.clear();
            grad.extend(scratch.iter().map(|v| -v));
            for (&e, g) in emb.brain_index_map.iter().zip(&data_grad) {
                grad[e].re += g;
            }
        }
        data - 0.5 * quad
    }

    /// Likelihood and noise-prior terms at `mu`; writes their gradient with
    /// respect to `mu` into `grad`.
    pub(crate) fn data_part(&self, mu: &[f64], sigma_h_sq: f64, sigma_s_sq: f64, grad: &mut [f64]) -> f64 {
        let mut r = Residuals::default();
        grad.iter_mut().for_each(|g| *g = 0.0);
        if let Some(d) = &self.data.direct {
            let prec = 1.0 / sigma_h_sq;
            for i in 0..mu.len() {
                if d.observed[i] {
                    let e = d.values[i] - mu[i];
                    r.ssr_h += e * e;
                    r.n_h += 1;
                    grad[i] += prec * e;
                }
            }
        }
        if let Some(p) = &self.data.projected {
            let wmu = p.weights.apply(mu).expect("dimensions checked at construction");
            let e: Vec<f64> = p.values.iter().zip(&wmu).map(|(y, m)| y - m).collect();
            r.ssr_s = e.iter().map(|x| x * x).sum();
            r.n_s = e.len();
            let back = p.weights.apply_t(&e).expect("dimensions checked at construction");
            let prec = 1.0 / sigma_s_sq;
            for (g, b) in grad.iter_mut().zip(back) {
                *g += prec * b;
            }
        }
        self.noise_terms(&r, sigma_h_sq, sigma_s_sq)
    }

    /// Draws each modeled noise variance from its inverse-gamma full
    /// conditional. The order restriction is not imposed here.
    pub fn update_sigmas<R: Rng + ?Sized>(&self, state: &ModelState, rng: &mut R) -> Result<(f64, f64)> {
        let mu = self.emb.restrict(&state.u);
        let r = self.residuals(&mu);
        let mut draw = |ssr: f64, n: usize, what: &str| -> Result<f64> {
            if !(ssr > 0.0) || n == 0 {
                return Err(Error::Degenerate(format!(
                    "{what} residual sum of squares is {ssr} over {n} observations"
                )));
            }
            let g = Gamma::new(n as f64 / 2.0, 2.0 / ssr)
                .map_err(|e| Error::NonFinite(format!("{what} gamma parameters: {e}")))?;
            Ok(1.0 / g.sample(rng))
        };
        let sh = if self.data.direct.is_some() {
            draw(r.ssr_h, r.n_h, "high-resolution")?
        } else {
            state.sigma_h_sq
        };
        let ss = if self.data.projected.is_some() {
            draw(r.ssr_s, r.n_s, "standard-resolution")?
        } else {
            state.sigma_s_sq
        };
        Ok((sh, ss))
    }

    /// Eigenvalues of the circulant mass matrix, `1/sigma^2 + 1/lambda`.
    ///
    /// The data precision uses the direct image's variance, or the coarse
    /// image's when no direct image is modeled.
    pub fn mass_eigvals(&self, state: &ModelState, out: &mut Vec<f64>) {
        let prec = if self.data.direct.is_some() {
            1.0 / state.sigma_h_sq
        } else if self.data.projected.is_some() {
            1.0 / state.sigma_s_sq
        } else {
            0.0
        };
        out.clear();
        out.extend(self.emb.eigvals.iter().map(|&l| prec + 1.0 / l));
    }

    /// Starting state: real parts at brain voxels are half the direct image
    /// (zero where unobserved), everything else zero; each variance is half
    /// the empirical variance of its image.
    pub fn initial_state(&self) -> Result<ModelState> {
        let n = self.emb.n_brain();
        let start: Vec<f64> = match &self.data.direct {
            Some(d) => (0..n).map(|i| if d.observed[i] { 0.5 * d.values[i] } else { 0.0 }).collect(),
            None => vec![0.0; n],
        };
        let u = self.emb.embed(&start)?;
        let half_var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len().max(2) - 1) as f64;
            if s > 0.0 {
                0.5 * s
            } else {
                1.0
            }
        };
        let sigma_h_sq = match &self.data.direct {
            Some(d) => {
                let obs: Vec<f64> = (0..n).filter(|&i| d.observed[i]).map(|i| d.values[i]).collect();
                half_var(&obs)
            }
            None => 1.0,
        };
        let sigma_s_sq = match &self.data.projected {
            Some(p) => half_var(&p.values),
            None => 1.0,
        };
        Ok(ModelState {
            u,
            sigma_h_sq,
            sigma_s_sq,
        })
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}
