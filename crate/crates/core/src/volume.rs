//! Regular 3D lattices, brain masks and scalar volumes.
//!
//! Voxels are stored in column-major order (x fastest), matching the NIfTI
//! on-disk layout: the linear index of `(i, j, k)` is `i + nx * (j + ny * k)`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A regular lattice with axis-aligned voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub dims: [usize; 3],
    /// Voxel edge lengths in mm.
    pub voxel_size: [f64; 3],
    /// World coordinate (mm) of voxel index (0, 0, 0).
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn index_of(&self, linear: usize) -> [usize; 3] {
        let i = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn contains(&self, idx: [i64; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    /// World position (mm) of a voxel center.
    pub fn world_coords(&self, idx: [usize; 3]) -> Result<[f64; 3]> {
        if (0..3).any(|a| idx[a] >= self.dims[a]) {
            return Err(Error::InvalidArgument(format!(
                "index {idx:?} outside grid dims {:?}",
                self.dims
            )));
        }
        Ok(self.world_unchecked(idx))
    }

    #[inline]
    pub(crate) fn world_unchecked(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] as f64 * self.voxel_size[0],
            self.origin[1] + idx[1] as f64 * self.voxel_size[1],
            self.origin[2] + idx[2] as f64 * self.voxel_size[2],
        ]
    }

    /// Continuous (fractional) index of a world position.
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.voxel_size[0],
            (p[1] - self.origin[1]) / self.voxel_size[1],
            (p[2] - self.origin[2]) / self.voxel_size[2],
        ]
    }

    /// The voxel whose extent contains `p`, if any.
    pub fn voxel_containing(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// A scalar image restricted to the voxels selected by `mask`.
///
/// Values at unmasked voxels are carried along but never read by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVolume {
    pub grid: Grid3,
    pub mask: Vec<bool>,
    pub data: Vec<f64>,
}

impl MaskedVolume {
    pub fn new(grid: Grid3, mask: Vec<bool>, data: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if mask.len() != n || data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "grid has {n} voxels but mask has {} and data has {}",
                mask.len(),
                data.len()
            )));
        }
        Ok(Self { grid, mask, data })
    }

    /// Background is any voxel that is zero or non-finite.
    pub fn from_data(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        let mask = data.iter().map(|v| v.is_finite() && *v != 0.0).collect();
        Self::new(grid, mask, data)
    }

    /// Volume with every voxel in the mask.
    pub fn full(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        let mask = vec![true; grid.len()];
        Self::new(grid, mask, data)
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Linear indices of masked voxels in column-major order.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn masked_values(&self) -> Vec<f64> {
        self.mask
            .iter()
            .zip(&self.data)
            .filter_map(|(&m, &v)| m.then_some(v))
            .collect()
    }

    /// World coordinates of masked voxel centers, in mask order.
    pub fn masked_coords(&self) -> Vec<[f64; 3]> {
        self.masked_indices()
            .into_iter()
            .map(|l| self.grid.world_unchecked(self.grid.index_of(l)))
            .collect()
    }

    /// Map from linear voxel index to ordinal among masked voxels.
    pub fn ordinal_map(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.mask
            .iter()
            .map(|&m| {
                m.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    /// A volume on the same grid and mask with masked values replaced.
    pub fn with_masked_values(&self, values: &[f64]) -> Result<Self> {
        let idx = self.masked_indices();
        if idx.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} masked voxels but {} values",
                idx.len(),
                values.len()
            )));
        }
        let mut data = vec![0.0; self.grid.len()];
        for (&l, &v) in idx.iter().zip(values) {
            data[l] = v;
        }
        Self::new(self.grid.clone(), self.mask.clone(), data)
    }

    /// Debug dump with one voxel per row: `i,j,k,x,y,z,value,mask`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "i,j,k,x,y,z,value,mask").map_err(io)?;
        for l in 0..self.grid.len() {
            let idx = self.grid.index_of(l);
            let p = self.grid.world_unchecked(idx);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                idx[0], idx[1], idx[2], p[0], p[1], p[2], self.data[l], self.mask[l] as u8
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
