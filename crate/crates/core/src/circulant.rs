//! Toroidal (nested block-circulant) embedding of a stationary kernel.
//!
//! The source grid is wrapped onto an extended grid whose side lengths are
//! powers of two at least `2 (d - 1)`. The covariance of the extended field is
//! then block-circulant, diagonalized by the 3D DFT, and every product with
//! `C` or `C^-1` costs two FFTs.
//!
//! Conventions: `lambda = DFT(c)` (unnormalized forward transform) holds the
//! exact eigenvalues of `C`; `C u = IDFT(lambda * DFT(u))` with the inverse
//! scaled by `1/N`.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::kernel::KernelParams;
use crate::volume::Grid3;

/// A complex field over the extended grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub values: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![Complex64::default(); n],
        }
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Self {
        assert_eq!(re.len(), im.len());
        Self {
            values: re
                .iter()
                .zip(im)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.im).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Real inner product over both parts, `Re(self^H other)`.
    pub fn dot(&self, other: &ComplexField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}

/// Smallest power of two at least `2 (d - 1)` along each axis (1 for
/// singleton axes).
pub fn extended_dims(d: [usize; 3]) -> [usize; 3] {
    d.map(|di| {
        if di <= 1 {
            1
        } else {
            (2 * (di - 1)).next_power_of_two()
        }
    })
}

/// Circulant base and its eigenvalues, with no definiteness check.
#[derive(Debug, Clone)]
pub struct CirculantBase {
    pub extended_dims: [usize; 3],
    pub base: Vec<f64>,
    pub eigvals: Vec<f64>,
    pub min_eig: f64,
    /// Largest |Im| among the DFT coefficients of the base.
    pub max_imag: f64,
}

/// Wrap distance along one axis of length `ext`: offsets past the midpoint
/// fold back toward the nearer periodic image.
#[inline]
fn wrapped_offset(n: usize, ext: usize) -> usize {
    n.min(ext - n)
}

/// Fills the circulant base in column-major order over `ext` and computes
/// the eigenvalues with one forward DFT.
pub fn circulant_base(
    voxel_size: [f64; 3],
    ext: [usize; 3],
    params: &KernelParams,
    fft: &Fft3,
) -> CirculantBase {
    assert_eq!(fft.dims(), ext);
    let n: usize = ext.iter().product();
    let mut base = Vec::with_capacity(n);
    for l in 0..ext[2] {
        let dz = wrapped_offset(l, ext[2]) as f64 * voxel_size[2];
        for m in 0..ext[1] {
            let dy = wrapped_offset(m, ext[1]) as f64 * voxel_size[1];
            for i in 0..ext[0] {
                let dx = wrapped_offset(i, ext[0]) as f64 * voxel_size[0];
                base.push(params.cov((dx * dx + dy * dy + dz * dz).sqrt()));
            }
        }
    }
    let mut spec: Vec<Complex64> = base.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    fft.forward(&mut spec);
    let max_imag = spec.iter().fold(0.0f64, |a, v| a.max(v.im.abs()));
    let eigvals: Vec<f64> = spec.iter().map(|v| v.re).collect();
    let min_eig = eigvals.iter().copied().fold(f64::INFINITY, f64::min);
    CirculantBase {
        extended_dims: ext,
        base,
        eigvals,
        min_eig,
        max_imag,
    }
}

/// Escape hatches for kernels whose minimal embedding is indefinite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbeddingOptions {
    /// Retry once with every extended dimension doubled.
    pub allow_extend: bool,
    /// Raise eigenvalues below `1e-10 * max` to that floor.
    pub allow_clamp: bool,
}

/// A positive-definite circulant embedding of a masked source grid.
#[derive(Debug, Clone)]
pub struct CirculantEmbedding {
    pub source_dims: [usize; 3],
    pub extended_dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub base: Vec<f64>,
    pub eigvals: Vec<f64>,
    pub min_eig: f64,
    /// Number of eigenvalues raised by clamping.
    pub clamped: usize,
    /// Extended-grid ordinal of each masked source voxel, increasing.
    pub brain_index_map: Vec<usize>,
    fft: Fft3,
}

impl CirculantEmbedding {
    /// Embedding of the whole source grid.
    pub fn new(grid: &Grid3, params: &KernelParams, opts: EmbeddingOptions) -> Result<Self> {
        let mut ext = extended_dims(grid.dims);
        let mut fft = Fft3::new(ext);
        let mut cb = circulant_base(grid.voxel_size, ext, params, &fft);
        let scale = cb.eigvals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if cb.max_imag > 1e-8 * scale {
            return Err(Error::NonFinite(format!(
                "circulant eigenvalues have imaginary parts up to {:.3e}",
                cb.max_imag
            )));
        }
        if cb.min_eig <= 0.0 && opts.allow_extend {
            let bigger = ext.map(|d| if d > 1 { 2 * d } else { d });
            log::warn!(
                "embedding on {ext:?} has min eigenvalue {:.3e}; retrying on {bigger:?}",
                cb.min_eig
            );
            ext = bigger;
            fft = Fft3::new(ext);
            cb = circulant_base(grid.voxel_size, ext, params, &fft);
        }
        let mut clamped = 0;
        if cb.min_eig <= 0.0 && opts.allow_clamp {
            let max = cb.eigvals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let floor = 1e-10 * max;
            for v in &mut cb.eigvals {
                if *v < floor {
                    *v = floor;
                    clamped += 1;
                }
            }
            log::warn!(
                "clamped {clamped} circulant eigenvalues (min was {:.3e}) to {floor:.3e}",
                cb.min_eig
            );
            cb.min_eig = floor;
        }
        if !(cb.min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eig: cb.min_eig });
        }
        let brain_index_map = (0..grid.len())
            .map(|l| {
                let [i, j, k] = grid.index_of(l);
                i + ext[0] * (j + ext[1] * k)
            })
            .collect();
        Ok(Self {
            source_dims: grid.dims,
            extended_dims: ext,
            voxel_size: grid.voxel_size,
            base: cb.base,
            eigvals: cb.eigvals,
            min_eig: cb.min_eig,
            clamped,
            brain_index_map,
            fft,
        })
    }

    /// Restricts the brain index map to the masked source voxels.
    pub fn with_mask(mut self, mask: &[bool]) -> Result<Self> {
        let n: usize = self.source_dims.iter().product();
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, source grid has {n}",
                mask.len()
            )));
        }
        let ext = self.extended_dims;
        let [d0, d1, _] = self.source_dims;
        self.brain_index_map = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(l, _)| {
                let i = l % d0;
                let j = (l / d0) % d1;
                let k = l / (d0 * d1);
                i + ext[0] * (j + ext[1] * k)
            })
            .collect();
        Ok(self)
    }

    /// Number of extended-grid points `N`.
    pub fn len(&self) -> usize {
        self.eigvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigvals.is_empty()
    }

    pub fn n_brain(&self) -> usize {
        self.brain_index_map.len()
    }

    pub fn fft(&self) -> &Fft3 {
        &self.fft
    }

    fn check_len(&self, u: &ComplexField) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "field has {} entries, embedding has {}",
                u.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// In place: `buf <- IDFT(g(k) * DFT(buf))`.
    pub fn apply_spectral(&self, buf: &mut [Complex64], g: impl Fn(usize) -> f64) {
        self.fft.forward(buf);
        for (k, v) in buf.iter_mut().enumerate() {
            *v *= g(k);
        }
        self.fft.inverse(buf);
    }

    /// `(1/N) sum_k g(k) |DFT(buf)_k|^2`, destroying `buf`. Compensated sum.
    pub fn spectral_energy(&self, buf: &mut [Complex64], g: impl Fn(usize) -> f64) -> f64 {
        self.fft.forward(buf);
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (k, v) in buf.iter().enumerate() {
            let y = g(k) * v.norm_sqr() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum / self.len() as f64
    }

    /// `C u`.
    pub fn cmul(&self, u: &ComplexField) -> Result<ComplexField> {
        self.check_len(u)?;
        let mut out = u.clone();
        self.apply_spectral(&mut out.values, |k| self.eigvals[k]);
        Ok(out)
    }

    /// `C^-1 u`.
    pub fn cinv_mul(&self, u: &ComplexField) -> Result<ComplexField> {
        self.check_len(u)?;
        let mut out = u.clone();
        self.apply_spectral(&mut out.values, |k| 1.0 / self.eigvals[k]);
        Ok(out)
    }

    /// `u^H C^-1 u`.
    pub fn quad_form(&self, u: &ComplexField) -> Result<f64> {
        self.check_len(u)?;
        let mut buf = u.values.clone();
        Ok(self.spectral_energy(&mut buf, |k| 1.0 / self.eigvals[k]))
    }

    /// Draws `u ~ CN(0, C)`: real and imaginary parts independent `N(0, C)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ComplexField {
        let n = self.len();
        let mut buf: Vec<Complex64> = (0..n)
            .map(|k| {
                let s = self.eigvals[k].sqrt();
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * s, im * s)
            })
            .collect();
        self.fft.inverse_unnormalized(&mut buf);
        let scale = 1.0 / (n as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= scale);
        ComplexField { values: buf }
    }

    /// Real parts at masked source voxels, in mask order.
    pub fn restrict(&self, u: &ComplexField) -> Vec<f64> {
        self.brain_index_map.iter().map(|&e| u.values[e].re).collect()
    }

    /// Field with `values` as real parts at masked voxels and zeros elsewhere.
    pub fn embed(&self, values: &[f64]) -> Result<ComplexField> {
        if values.len() != self.n_brain() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} brain voxels",
                values.len(),
                self.n_brain()
            )));
        }
        let mut u = ComplexField::zeros(self.len());
        for (&e, &v) in self.brain_index_map.iter().zip(values) {
            u.values[e].re = v;
        }
        Ok(u)
    }

    /// Debug dump: 8-byte header of three little-endian u16 extended dims
    /// plus two zero bytes, then `c` and `lambda` as little-endian f64.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 + 16 * self.len());
        for d in self.extended_dims {
            let d = u16::try_from(d)
                .map_err(|_| Error::InvalidArgument(format!("dim {d} does not fit in u16")))?;
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&[0, 0]);
        for v in self.base.iter().chain(&self.eigvals) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}
