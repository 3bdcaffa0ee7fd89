//! Isotropic radial-basis covariance `k(d) = tau_sq * exp(-psi * d^nu)`.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// Parameters of the radial-basis covariance.
///
/// `tau_sq` is the partial sill, `psi` the decay rate in mm^-nu and `nu` the
/// exponent: 1 gives the Exponential kernel and 2 the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub tau_sq: f64,
    pub psi: f64,
    pub nu: f64,
}

impl KernelParams {
    pub fn new(tau_sq: f64, psi: f64, nu: f64) -> Result<Self> {
        let ok = tau_sq > 0.0
            && tau_sq.is_finite()
            && psi > 0.0
            && psi.is_finite()
            && nu > 0.0
            && nu <= 2.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "kernel parameters need tau_sq > 0, psi > 0, 0 < nu <= 2; got ({tau_sq}, {psi}, {nu})"
            )));
        }
        Ok(Self { tau_sq, psi, nu })
    }

    /// Parameters whose correlation falls to one half at `fwhm / 2` mm.
    pub fn from_fwhm(fwhm: f64, nu: f64, tau_sq: f64) -> Result<Self> {
        if !(fwhm > 0.0 && fwhm.is_finite()) {
            return Err(Error::InvalidArgument(format!("fwhm must be positive, got {fwhm}")));
        }
        Self::new(tau_sq, LN_2 * (2.0 / fwhm).powf(nu), nu)
    }

    #[inline]
    pub fn cov(&self, distance: f64) -> f64 {
        self.tau_sq * self.correlation(distance)
    }

    #[inline]
    pub fn correlation(&self, distance: f64) -> f64 {
        if distance == 0.0 {
            return 1.0;
        }
        if self.nu == 1.0 {
            (-self.psi * distance).exp()
        } else if self.nu == 2.0 {
            (-self.psi * distance * distance).exp()
        } else {
            (-self.psi * distance.powf(self.nu)).exp()
        }
    }

    /// Full width at half maximum of the correlation function, in mm.
    pub fn fwhm(&self) -> f64 {
        2.0 * (LN_2 / self.psi).powf(1.0 / self.nu)
    }

    /// Distance beyond which the correlation is below `rho`.
    pub fn radius_for_correlation(&self, rho: f64) -> f64 {
        assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
        ((1.0 / rho).ln() / self.psi).powf(1.0 / self.nu)
    }
}
