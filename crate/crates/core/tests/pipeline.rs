//! End-to-end run through the public API: two-resolution data, a dual fit
//! and thresholding of the resulting posterior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dualres_core::decision::{decide_at, posterior_m, threshold_for_count, Reading};
use dualres_core::hmc::HmcConfig;
use dualres_core::methods::{Method, MethodContext};
use dualres_core::{EmbeddingOptions, Grid3, KernelParams, MaskedVolume};

fn bump(p: [f64; 3]) -> f64 {
    3.0 * (-((p[0] - 5.0).powi(2) + (p[1] - 9.0).powi(2)) / 8.0).exp()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn dual_fit_denoises_and_localizes_a_bump() {
    let high = MaskedVolume::full(Grid3::new([16, 16, 1], [1.0; 3], [0.0; 3]).unwrap(), vec![0.0; 256]).unwrap();
    let std = MaskedVolume::full(Grid3::new([8, 8, 1], [2.0, 2.0, 1.0], [0.5, 0.5, 0.0]).unwrap(), vec![0.0; 64])
        .unwrap();
    let params = KernelParams::from_fwhm(4.0, 1.0, 1.0).unwrap();
    let ctx = MethodContext::new(&high, Some(&std), params, 4.0, EmbeddingOptions::default()).unwrap();

    let truth: Vec<f64> = high.masked_coords().into_iter().map(bump).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y_h: Vec<f64> = truth.iter().map(|m| m + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w = ctx.w().unwrap();
    let y_s: Vec<f64> = w
        .apply(&truth)
        .unwrap()
        .into_iter()
        .map(|m| m + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let hmc = HmcConfig {
        chains: 2,
        warmup: 200,
        iterations: 200,
        thin: 1,
        leapfrog_steps: 10,
        seed: 5,
        ..HmcConfig::default()
    };
    let fit = ctx.fit(Method::Dual, Some(&y_h), None, Some(&y_s), &hmc).unwrap();
    assert!(fit.failed.is_empty(), "{:?}", fit.failed);
    assert_eq!(fit.n_voxels(), 256);

    let mean = fit.posterior_mean();
    let (fit_err, raw_err) = (mse(&mean, &truth), mse(&y_h, &truth));
    assert!(fit_err < 0.5 * raw_err, "posterior mean mse {fit_err}, raw mse {raw_err}");

    let active: Vec<bool> = truth.iter().map(|&m| m > 1.0).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    let stats = posterior_m(&fit.chains, Reading::MonteCarlo).unwrap();
    let (threshold, achieved) = threshold_for_count(&stats.f_bar, n_active).unwrap();
    let summary = decide_at(&stats, threshold);
    assert_eq!(summary.n_discoveries(), achieved);
    let hits = summary.delta.iter().zip(&active).filter(|&(&d, &a)| d && a).count();
    assert!(hits as f64 >= 0.7 * achieved as f64, "{hits} of {achieved} discoveries are active");
}
