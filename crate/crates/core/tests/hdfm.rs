use csi_hdfm::hdfm::{
    decompose, estimate_sigma2, extract_features, fit_factor_count, max_principal_angle_deg, pca_compress, HdfmConfig,
    Reference, Sigma2Mode,
};
use csi_hdfm::spectral::{covariance, eigenvalues, spectrum_of, EigenSpectrum};
use csi_hdfm::synth::{gen_noise, gen_spiked, SpikedModelSpec};
use proptest::prelude::*;

fn planted(n: usize, t: usize, strengths: Vec<f64>, seed: u64) -> csi_hdfm::synth::SpikedSample {
    gen_spiked(&SpikedModelSpec {
        n,
        t,
        strengths,
        sigma2: 1.0,
        seed,
    })
    .unwrap()
}

#[test]
fn pure_noise_selects_zero() {
    let hits = (0..20)
        .filter(|&s| fit_factor_count(&gen_noise(100, 1000, 1.0, 500 + s).unwrap(), &HdfmConfig::default()).unwrap().p_hat == 0)
        .count();
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn subcritical_spike_is_invisible() {
    let c: f64 = 0.1;
    let lmin = 4.0 * c.sqrt();
    let strengths = vec![1.5 * lmin, lmin, 0.5 * c.sqrt()];
    let hits = (0..20)
        .filter(|&s| fit_factor_count(&planted(100, 1000, strengths.clone(), 900 + s).r, &HdfmConfig::default()).unwrap().p_hat == 2)
        .count();
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn monte_carlo_reference_agrees_with_analytic_on_noise() {
    for seed in 0..3 {
        let r = gen_noise(100, 1000, 1.0, 70 + seed).unwrap();
        let analytic = fit_factor_count(&r, &HdfmConfig::default()).unwrap();
        let mc = fit_factor_count(
            &r,
            &HdfmConfig {
                reference: Reference::MonteCarlo,
                mc_trials: 10,
                seed,
                ..HdfmConfig::default()
            },
        )
        .unwrap();
        assert_eq!(analytic.p_hat, 0);
        assert_eq!(mc.p_hat, 0);
        for (a, m) in analytic.distance_curve.iter().zip(&mc.distance_curve) {
            // one eigenvalue's share of the spectrum
            let unit = a.sigma2 / 100.0;
            assert!((a.distance - m.distance).abs() < unit, "p={} {} vs {}", a.p, a.distance, m.distance);
        }
    }
}

#[test]
fn results_are_deterministic() {
    let r = planted(60, 600, vec![8.0, 5.0], 3).r;
    let cfg = HdfmConfig {
        reference: Reference::MonteCarlo,
        mc_trials: 3,
        seed: 11,
        ..HdfmConfig::default()
    };
    let a = fit_factor_count(&r, &cfg).unwrap();
    let b = fit_factor_count(&r, &cfg).unwrap();
    assert_eq!(a.p_hat, b.p_hat);
    assert_eq!(a.features, b.features);
    for (x, y) in a.distance_curve.iter().zip(&b.distance_curve) {
        assert_eq!((x.p, x.distance.to_bits(), x.sigma2.to_bits()), (y.p, y.distance.to_bits(), y.sigma2.to_bits()));
    }
}

#[test]
fn residual_energy_matches_noise_energy() {
    let c: f64 = 0.1;
    let lmin = 4.0 * c.sqrt();
    let s = planted(100, 1000, vec![3.0 * lmin, 2.0 * lmin, lmin], 21);
    let u = decompose(&s.r, 3).unwrap().residual;
    let ratio = u.norm_squared() / s.noise.norm_squared();
    assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
}

#[test]
fn sigma2_estimate_on_noise() {
    for seed in 0..20 {
        let sp = spectrum_of(&gen_noise(200, 2000, 1.0, 300 + seed).unwrap()).unwrap();
        let s2 = estimate_sigma2(&sp).unwrap();
        assert!((0.95..=1.05).contains(&s2), "seed {seed}: {s2}");
        let mut spiked = sp.values().to_vec();
        spiked[0] += 1e6;
        let s2b = estimate_sigma2(&EigenSpectrum::new(spiked, 200, 2000).unwrap()).unwrap();
        assert!((s2b / s2 - 1.0).abs() < 0.01);
    }
}

#[test]
fn wrong_fixed_p_has_worse_subspace_angle() {
    let s = planted(100, 1000, vec![40.0, 30.0, 20.0], 5);
    let fit = fit_factor_count(&s.r, &HdfmConfig::default()).unwrap();
    assert_eq!(fit.p_hat, 3);
    let good = max_principal_angle_deg(&fit.features, &s.factors).unwrap();
    let wrong = max_principal_angle_deg(&pca_compress(&s.r, 2).unwrap(), &s.factors).unwrap();
    assert!(good < wrong, "{good} vs {wrong}");
    assert_eq!(pca_compress(&s.r, 3).unwrap(), extract_features(&s.r, 3).unwrap());
}

#[test]
fn full_rank_level_is_lossless() {
    let r = gen_noise(12, 30, 1.0, 4).unwrap();
    let d = decompose(&r, 12).unwrap();
    assert!(d.residual.amax() < 1e-8);
    assert!(decompose(&r, 13).is_err());
}

#[test]
fn factor_covariance_matches_strengths() {
    // temporal factors of the planted model carry the strongest eigenvalues
    let s = planted(100, 2000, vec![50.0, 20.0], 8);
    let f = extract_features(&s.r, 2).unwrap();
    let spec = eigenvalues(&covariance(&f).unwrap(), 2000).unwrap();
    let top = spectrum_of(&s.r).unwrap();
    for j in 0..2 {
        assert!((spec.values()[j] - top.values()[j]).abs() < 1e-8 * top.values()[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn selection_is_scale_equivariant(
        alpha in 0.01f64..100.0,
        seed in 0u64..1000,
        median in any::<bool>(),
    ) {
        let r = planted(60, 600, vec![6.0, 3.0], seed).r;
        let cfg = HdfmConfig {
            sigma2_mode: if median { Sigma2Mode::FitMedian } else { Sigma2Mode::FitDistance },
            ..HdfmConfig::default()
        };
        let a = fit_factor_count(&r, &cfg).unwrap();
        let b = fit_factor_count(&(&r * alpha), &cfg).unwrap();
        prop_assert_eq!(a.p_hat, b.p_hat);
        prop_assert!((b.sigma2_hat / a.sigma2_hat / (alpha * alpha) - 1.0).abs() < 1e-9);
    }
}
