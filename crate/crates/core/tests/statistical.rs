//! Monte-Carlo checks of the estimators against simulated truth.

use rayon::prelude::*;

use unlinked_core::baselines::full_gp_fit;
use unlinked_core::oracle::{recovery_experiment, RecoveryCell, Signal};
use unlinked_core::seeding::replicate_seed;
use unlinked_core::simulate::{simulate, PermSpec, SimConfig};
use unlinked_core::CovarianceParams;

#[test]
fn full_gp_is_consistent_at_moderate_n() {
    let truth = CovarianceParams::new(5.0, 0.5, 0.5).unwrap();
    let init = CovarianceParams::new(1.0, 0.3, 1.0).unwrap();
    let fits: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|rep| {
            let cfg = SimConfig {
                k: 6,
                b: 100,
                beta: 2.0,
                cov: truth,
                perm_x: PermSpec::RandomHamming,
                perm_s: PermSpec::RandomHamming,
                seed: replicate_seed(7, 0, rep),
            };
            full_gp_fit(&simulate(&cfg).unwrap(), &init).unwrap()
        })
        .collect();
    let m = fits.len() as f64;
    let mean = |f: fn(&unlinked_core::baselines::GLSFit) -> f64| fits.iter().map(f).sum::<f64>() / m;
    let rel = |got: f64, want: f64| (got - want).abs() / want;
    assert!(rel(mean(|f| f.beta_hat), 2.0) < 0.05);
    assert!(rel(mean(|f| f.cov_hat.sigma2), 5.0) < 0.3, "sigma2 {}", mean(|f| f.cov_hat.sigma2));
    assert!(rel(mean(|f| f.cov_hat.phi), 0.5) < 0.3, "phi {}", mean(|f| f.cov_hat.phi));
    assert!(rel(mean(|f| f.cov_hat.tau2), 0.5) < 0.3, "tau2 {}", mean(|f| f.cov_hat.tau2));
}

#[test]
fn brute_force_recovers_pairs_at_high_snr() {
    let cell = RecoveryCell {
        k: 3,
        b: 30,
        signal: Signal::Beta(20.0),
        cov: CovarianceParams::new(1.0, 0.5, 0.01).unwrap(),
    };
    let rows = recovery_experiment(&[cell], 50, 3).unwrap();
    assert!(rows[0].recovery_rate >= 0.9, "{:?}", rows[0]);
    assert!(rows[0].tie_recovery_rate >= rows[0].recovery_rate);
}

#[test]
fn null_signal_gives_small_beta_errors() {
    let cell = RecoveryCell {
        k: 3,
        b: 30,
        signal: Signal::Beta(0.0),
        cov: CovarianceParams::new(1.0, 0.5, 0.1).unwrap(),
    };
    let row = &recovery_experiment(&[cell], 40, 5).unwrap()[0];
    assert!(row.beta_mae < 0.3, "{row:?}");
    for p in [row.recovery_rate, row.tie_recovery_rate, row.pi1_recovery_rate] {
        assert!((0.0..=1.0).contains(&p));
    }
}
