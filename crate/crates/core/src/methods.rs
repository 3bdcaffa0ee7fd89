//! The four fitting modes compared throughout: the dual-resolution model,
//! the two single-resolution models and naive averaging.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;

use crate::circulant::{CirculantEmbedding, EmbeddingOptions};
use crate::error::{Error, Result};
use crate::hmc::{run_chains, HmcConfig, PosteriorDraws};
use crate::kernel::KernelParams;
use crate::kriging::{build_w, KrigingWeights};
use crate::posterior::{DirectData, ModelData, Posterior, ProjectedData};
use crate::volume::MaskedVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dual,
    High,
    Std,
    Naive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dual, Method::High, Method::Naive, Method::Std];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dual => "dual",
            Method::High => "high",
            Method::Std => "std",
            Method::Naive => "naive",
        }
    }

    pub fn needs_std(self) -> bool {
        !matches!(self, Method::High)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dual" => Ok(Method::Dual),
            "high" => Ok(Method::High),
            "std" | "standard" => Ok(Method::Std),
            "naive" => Ok(Method::Naive),
            _ => Err(Error::InvalidArgument(format!(
                "unknown method '{s}' (expected dual, high, std or naive)"
            ))),
        }
    }
}

/// Fixed ingredients shared by every fit on one pair of grids: embeddings
/// and the high-to-standard projection `W`.
#[derive(Debug)]
pub struct MethodContext {
    pub params: KernelParams,
    pub radius: f64,
    high_emb: CirculantEmbedding,
    std: Option<StdSide>,
}

#[derive(Debug)]
struct StdSide {
    emb: CirculantEmbedding,
    w: Arc<KrigingWeights>,
}

impl MethodContext {
    /// `high` and `std` supply grids and masks; their data are ignored.
    pub fn new(
        high: &MaskedVolume,
        std: Option<&MaskedVolume>,
        params: KernelParams,
        radius: f64,
        opts: EmbeddingOptions,
    ) -> Result<Self> {
        let high_emb = CirculantEmbedding::new(&high.grid, &params, opts)?.with_mask(&high.mask)?;
        let std = match std {
            Some(s) => {
                let emb = CirculantEmbedding::new(&s.grid, &params, opts)?.with_mask(&s.mask)?;
                let w = Arc::new(build_w(high, s, &params, radius)?);
                Some(StdSide { emb, w })
            }
            None => None,
        };
        Ok(Self {
            params,
            radius,
            high_emb,
            std,
        })
    }

    pub fn high_embedding(&self) -> &CirculantEmbedding {
        &self.high_emb
    }

    /// Standard-by-high projection matrix, when a standard grid is present.
    pub fn w(&self) -> Option<&Arc<KrigingWeights>> {
        self.std.as_ref().map(|s| &s.w)
    }

    pub fn n_high(&self) -> usize {
        self.high_emb.n_brain()
    }

    fn std_side(&self, method: Method) -> Result<&StdSide> {
        self.std
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("method {method} needs a standard-resolution image")))
    }

    /// Fits `method`. `y_h` and `observed` are indexed by masked high-res
    /// ordinal, `y_s` by masked standard-res ordinal.
    pub fn fit(
        &self,
        method: Method,
        y_h: Option<&[f64]>,
        observed: Option<&[bool]>,
        y_s: Option<&[f64]>,
        config: &HmcConfig,
    ) -> Result<MethodFit> {
        let direct = |values: Vec<f64>| -> DirectData {
            let observed = observed.map_or_else(|| vec![true; values.len()], <[bool]>::to_vec);
            DirectData { values, observed }
        };
        let need = |y: Option<&[f64]>, what: &str| {
            y.ok_or_else(|| Error::InvalidArgument(format!("method {method} needs {what} data")))
                .map(<[f64]>::to_vec)
        };
        let (emb, data) = match method {
            Method::High => (
                &self.high_emb,
                ModelData {
                    direct: Some(direct(need(y_h, "high-resolution")?)),
                    projected: None,
                },
            ),
            Method::Dual => {
                let s = self.std_side(method)?;
                (
                    &self.high_emb,
                    ModelData {
                        direct: Some(direct(need(y_h, "high-resolution")?)),
                        projected: Some(ProjectedData {
                            values: need(y_s, "standard-resolution")?,
                            weights: Arc::clone(&s.w),
                        }),
                    },
                )
            }
            Method::Naive => {
                let s = self.std_side(method)?;
                let yh = need(y_h, "high-resolution")?;
                let back = s.w.apply_t(&need(y_s, "standard-resolution")?)?;
                let avg = yh.iter().zip(&back).map(|(a, b)| 0.5 * (a + b)).collect();
                (
                    &self.high_emb,
                    ModelData {
                        direct: Some(direct(avg)),
                        projected: None,
                    },
                )
            }
            Method::Std => {
                let s = self.std_side(method)?;
                (
                    &s.emb,
                    ModelData {
                        direct: Some(DirectData::full(need(y_s, "standard-resolution")?)),
                        projected: None,
                    },
                )
            }
        };
        let post = Posterior::new(emb, &data)?;
        let mut chains = Vec::new();
        let mut failed = Vec::new();
        for (c, r) in run_chains(&post, config)?.into_iter().enumerate() {
            match r {
                Ok(d) => chains.push(d),
                Err(e) => {
                    warn!("{method}: chain {c} failed: {e}");
                    failed.push((c, e.to_string()));
                }
            }
        }
        if chains.is_empty() {
            return Err(Error::Degenerate(format!("{method}: every chain failed")));
        }
        if method == Method::Std {
            let w = &self.std_side(method)?.w;
            for d in &mut chains {
                project_rows(d, w)?;
            }
        }
        Ok(MethodFit { method, chains, failed })
    }
}

/// Replaces each kept standard-res row `mu_s` by `W^T mu_s` on the high-res
/// voxels. Being linear, this commutes with the posterior mean.
fn project_rows(d: &mut PosteriorDraws, w: &KrigingWeights) -> Result<()> {
    let mut out = Vec::with_capacity(d.n_draws() * w.n_cols);
    for g in 0..d.n_draws() {
        out.extend(w.apply_t(d.row(g))?);
    }
    d.mu = out;
    d.n_voxels = w.n_cols;
    Ok(())
}

/// Successful chains of one fit, each over the masked high-res voxels.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: Method,
    pub chains: Vec<PosteriorDraws>,
    /// `(chain, message)` for chains that aborted.
    pub failed: Vec<(usize, String)>,
}

impl MethodFit {
    pub fn n_voxels(&self) -> usize {
        self.chains[0].n_voxels
    }

    /// Posterior mean of `Re(mu_h)` pooled over chains.
    pub fn posterior_mean(&self) -> Vec<f64> {
        let n = self.n_voxels();
        let mut acc = vec![0.0; n];
        let mut count = 0usize;
        for d in &self.chains {
            for g in 0..d.n_draws() {
                for (a, x) in acc.iter_mut().zip(d.row(g)) {
                    *a += x;
                }
                count += 1;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
        acc
    }
}
