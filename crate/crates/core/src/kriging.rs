//! Sparse local-kriging weights mapping a field on knot voxels to target
//! voxel centers.
//!
//! Row `i` of `W` holds `K_N^-1 k_N` for the knots `N` within radius `r` of
//! target `i`; rows with no knots in range are zero. Weights are not
//! normalized.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::volume::{distance, MaskedVolume};

/// Masked knot voxels with precomputed ordinals.
struct Knots<'a> {
    vol: &'a MaskedVolume,
    ordinal: Vec<Option<usize>>,
}

impl<'a> Knots<'a> {
    fn new(vol: &'a MaskedVolume) -> Self {
        Self {
            vol,
            ordinal: vol.ordinal_map(),
        }
    }

    /// Knot ordinals and coordinates within `r` of `v`, in mask order.
    fn within(&self, v: [f64; 3], r: f64) -> (Vec<usize>, Vec<[f64; 3]>) {
        let g = &self.vol.grid;
        let c = g.continuous_index(v);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let reach = r / g.voxel_size[a];
            let l = (c[a] - reach).ceil().max(0.0);
            let h = (c[a] + reach).floor().min(g.dims[a] as f64 - 1.0);
            if h < l {
                return (Vec::new(), Vec::new());
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        let mut ords = Vec::new();
        let mut coords = Vec::new();
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let l = g.linear_index([i, j, k]);
                    let Some(o) = self.ordinal[l] else { continue };
                    let p = g.world_unchecked([i, j, k]);
                    if distance(p, v) <= r {
                        ords.push(o);
                        coords.push(p);
                    }
                }
            }
        }
        (ords, coords)
    }
}

/// Ordinals of masked voxels of `knots` within distance `r` of `v`, in
/// increasing order.
pub fn neighborhood(knots: &MaskedVolume, v: [f64; 3], r: f64) -> Vec<usize> {
    assert!(r > 0.0, "radius must be positive");
    Knots::new(knots).within(v, r).0
}

fn kernel_matrix(params: &KernelParams, coords: &[[f64; 3]]) -> DMatrix<f64> {
    let n = coords.len();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        k[(a, a)] = params.tau_sq;
        for b in 0..a {
            let c = params.cov(distance(coords[a], coords[b]));
            k[(a, b)] = c;
            k[(b, a)] = c;
        }
    }
    k
}

/// Kriging weights `K_N^-1 k_N` of the points `coords` for predicting at `v`.
pub fn local_weights(params: &KernelParams, coords: &[[f64; 3]], v: [f64; 3]) -> Result<Vec<f64>> {
    if coords.is_empty() {
        return Err(Error::InvalidArgument("empty kriging neighborhood".into()));
    }
    let kmat = kernel_matrix(params, coords);
    let rhs = DVector::from_iterator(coords.len(), coords.iter().map(|&p| params.cov(distance(p, v))));
    let chol = match kmat.clone().cholesky() {
        Some(c) => c,
        None => {
            let mut jittered = kmat.clone();
            for a in 0..coords.len() {
                jittered[(a, a)] += 1e-8 * params.tau_sq;
            }
            jittered.cholesky().ok_or(Error::SingularSystem {
                x: v[0],
                y: v[1],
                z: v[2],
            })?
        }
    };
    let mut w = chol.solve(&rhs);
    let resid = &rhs - &kmat * &w;
    w += chol.solve(&resid);
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem {
            x: v[0],
            y: v[1],
            z: v[2],
        });
    }
    Ok(w.iter().copied().collect())
}

/// Compressed-row sparse weight matrix, targets by knots.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    pub n_rows: usize,
    pub n_cols: usize,
    pub radius: f64,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub neighborhood_sizes: Vec<usize>,
}

/// Builds `W` with one row per masked voxel of `targets` and one column per
/// masked voxel of `knots`.
pub fn build_w(
    knots: &MaskedVolume,
    targets: &MaskedVolume,
    params: &KernelParams,
    r: f64,
) -> Result<KrigingWeights> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("kriging radius must be positive, got {r}")));
    }
    if knots.n_masked() == 0 || targets.n_masked() == 0 {
        return Err(Error::EmptyMask);
    }
    let index = Knots::new(knots);
    let sites = targets.masked_coords();
    let rows: Vec<(Vec<usize>, Vec<f64>)> = sites
        .par_iter()
        .map(|&v| {
            let (ords, coords) = index.within(v, r);
            if ords.is_empty() {
                return Ok((ords, Vec::new()));
            }
            let w = local_weights(params, &coords, v)?;
            Ok((ords, w))
        })
        .collect::<Result<_>>()?;
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut neighborhood_sizes = Vec::with_capacity(rows.len());
    row_ptr.push(0);
    for (ords, w) in rows {
        neighborhood_sizes.push(ords.len());
        col_idx.extend(ords);
        values.extend(w);
        row_ptr.push(col_idx.len());
    }
    Ok(KrigingWeights {
        n_rows: sites.len(),
        n_cols: knots.n_masked(),
        radius: r,
        row_ptr,
        col_idx,
        values,
        neighborhood_sizes,
    })
}

impl KrigingWeights {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::DimensionMismatch(format!(
                "W has {} columns, vector has {} entries",
                self.n_cols,
                x.len()
            )));
        }
        Ok((0..self.n_rows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &w)| w * x[j]).sum()
            })
            .collect())
    }

    /// `W^T y`.
    pub fn apply_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_rows {
            return Err(Error::DimensionMismatch(format!(
                "W has {} rows, vector has {} entries",
                self.n_rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.n_cols];
        for (i, &yi) in y.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &w) in c.iter().zip(v) {
                out[j] += w * yi;
            }
        }
        Ok(out)
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows)
            .map(|i| {
                let mut row = vec![0.0; self.n_cols];
                let (c, v) = self.row(i);
                for (&j, &w) in c.iter().zip(v) {
                    row[j] = w;
                }
                row
            })
            .collect()
    }

    /// Triplet text dump: `# rows cols nnz` header then `row col value`.
    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "# {} {} {}", self.n_rows, self.n_cols, self.nnz()).map_err(io)?;
        for i in 0..self.n_rows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                writeln!(w, "{i} {j} {x:e}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}
