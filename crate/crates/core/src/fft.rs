//! Three-dimensional complex DFTs over column-major buffers.
//!
//! Forward transforms are unnormalized; inverse transforms divide by `N`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Columns gathered per pass when transforming a strided axis.
const BLOCK: usize = 16;

thread_local! {
    static SCRATCH: RefCell<(Vec<Complex64>, Vec<Complex64>)> =
        const { RefCell::new((Vec::new(), Vec::new())) };
}

#[derive(Clone)]
struct AxisPlans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

#[derive(Clone)]
pub struct Fft3 {
    dims: [usize; 3],
    plans: [Option<AxisPlans>; 3],
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("dims", &self.dims).finish()
    }
}

impl Fft3 {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let plans = dims.map(|d| {
            (d > 1).then(|| AxisPlans {
                forward: planner.plan_fft_forward(d),
                inverse: planner.plan_fft_inverse(d),
            })
        });
        Self { dims, plans }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
        let s = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    /// Inverse transform without the `1/N` factor.
    pub fn inverse_unnormalized(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "buffer length does not match FFT dims");
        let [n0, n1, n2] = self.dims;
        SCRATCH.with(|cell| {
            let (scratch, lines) = &mut *cell.borrow_mut();
            for axis in 0..3 {
                let Some(plans) = &self.plans[axis] else {
                    continue;
                };
                let fft = if inverse { &plans.inverse } else { &plans.forward };
                let need = fft.get_inplace_scratch_len();
                if scratch.len() < need {
                    scratch.resize(need, Complex64::default());
                }
                match axis {
                    0 => fft.process_with_scratch(data, &mut scratch[..need]),
                    1 => {
                        // lines along y: stride n0, one group per z-slab
                        for k in 0..n2 {
                            let slab = &mut data[k * n0 * n1..(k + 1) * n0 * n1];
                            strided_pass(slab, n0, n1, fft.as_ref(), scratch, lines);
                        }
                    }
                    _ => strided_pass(data, n0 * n1, n2, fft.as_ref(), scratch, lines),
                }
            }
        });
    }
}

/// Transforms `count` interleaved lines of length `len` where element `t` of
/// line `c` sits at `c + t * stride`.
fn strided_pass(
    data: &mut [Complex64],
    stride: usize,
    len: usize,
    fft: &dyn Fft<f64>,
    scratch: &mut Vec<Complex64>,
    lines: &mut Vec<Complex64>,
) {
    let need = fft.get_inplace_scratch_len();
    if lines.len() < BLOCK * len {
        lines.resize(BLOCK * len, Complex64::default());
    }
    let mut c0 = 0;
    while c0 < stride {
        let w = BLOCK.min(stride - c0);
        for t in 0..len {
            let row = &data[c0 + t * stride..c0 + t * stride + w];
            for (b, v) in row.iter().enumerate() {
                lines[b * len + t] = *v;
            }
        }
        fft.process_with_scratch(&mut lines[..w * len], &mut scratch[..need]);
        for t in 0..len {
            let row = &mut data[c0 + t * stride..c0 + t * stride + w];
            for (b, v) in row.iter_mut().enumerate() {
                *v = lines[b * len + t];
            }
        }
        c0 += w;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(data: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
        let n = data.len();
        let mut out = vec![Complex64::default(); n];
        for k2 in 0..dims[2] {
            for k1 in 0..dims[1] {
                for k0 in 0..dims[0] {
                    let mut acc = Complex64::default();
                    for x2 in 0..dims[2] {
                        for x1 in 0..dims[1] {
                            for x0 in 0..dims[0] {
                                let phase = -2.0
                                    * PI
                                    * ((k0 * x0) as f64 / dims[0] as f64
                                        + (k1 * x1) as f64 / dims[1] as f64
                                        + (k2 * x2) as f64 / dims[2] as f64);
                                acc += data[x0 + dims[0] * (x1 + dims[1] * x2)]
                                    * Complex64::from_polar(1.0, phase);
                            }
                        }
                    }
                    out[k0 + dims[0] * (k1 + dims[1] * k2)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        for dims in [[4, 3, 2], [8, 1, 1], [1, 5, 1], [2, 2, 6], [20, 18, 3]] {
            let n: usize = dims.iter().product();
            let data: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut fast = data.clone();
            let plan = Fft3::new(dims);
            plan.forward(&mut fast);
            let slow = naive_dft(&data, dims);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9, "{dims:?}");
            }
            plan.inverse(&mut fast);
            for (a, b) in fast.iter().zip(&data) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
