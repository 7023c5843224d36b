use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::covkernel::{CovarianceParams, DomainPoints};
use crate::permops::{PermMoments, Permutation, RelaxedPermParams, RelaxedSampler};
use crate::simulate::{simulate, Dataset, PermSpec, SimConfig};

fn line_points(n: usize) -> DomainPoints {
    DomainPoints::new((0..n).map(|i| [i as f64 * 0.3, 0.0]).collect()).unwrap()
}

/// State with degenerate identity moments and unit precisions.
fn plain_state(k: usize, n: usize) -> VariationalState {
    let eye = DMatrix::identity(k, k);
    VariationalState {
        mu_beta: 0.0,
        sigma2_beta_q: 1.0,
        mu_w: DVector::zeros(n),
        sigma_w: DMatrix::identity(n, n),
        logdet_sigma_w: 0.0,
        la1: 3.0,
        lb1: 3.0,
        la2: 3.0,
        lb2: 3.0,
        er_inv: DMatrix::identity(n, n),
        phi_weights: vec![1.0],
        zeta_x: RelaxedPermParams::identity(k, 0.1, 1.0),
        zeta_s: RelaxedPermParams::identity(k, 0.1, 1.0),
        moments_x: PermMoments::degenerate(&eye),
        moments_s: PermMoments::degenerate(&eye),
        log_prior_x: 0.0,
        log_prior_s: 0.0,
        global_step: 0,
    }
}

fn identity_data(seed: u64, k: usize, b: usize) -> Dataset {
    let cfg = SimConfig {
        k,
        b,
        beta: 8.0,
        cov: CovarianceParams::new(5.0, 0.5, 0.5).unwrap(),
        perm_x: PermSpec::Hamming(0),
        perm_s: PermSpec::Hamming(0),
        seed,
    };
    simulate(&cfg).unwrap()
}

#[test]
fn beta_update_one_sample_least_squares() {
    let d = Dataset::new(line_points(2), vec![1.0, 0.0], vec![2.0, 0.0], 2, 1).unwrap();
    let mut s = plain_state(2, 2);
    let pr = Priors { sigma2_beta: 1e300, ..Priors::default() };
    update_beta(&mut s, &d, &pr).unwrap();
    assert!((s.sigma2_beta_q - 1.0).abs() < 1e-12);
    assert!((s.mu_beta - 2.0).abs() < 1e-12);
}

#[test]
fn w_update_two_identity_case() {
    let d = Dataset::new(line_points(2), vec![1.0, 0.0], vec![2.0, 0.0], 2, 1).unwrap();
    let mut s = plain_state(2, 2);
    update_w(&mut s, &d, &Priors::default()).unwrap();
    assert!((&s.sigma_w - DMatrix::identity(2, 2) * 0.5).norm() < 1e-12);
    assert!((s.logdet_sigma_w - 2.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn variance_factor_shapes() {
    let (k, b) = (6, 49);
    let n = k * b;
    let d = Dataset::new(line_points(n), vec![0.5; n], vec![1.0; n], k, b).unwrap();
    let mut s = plain_state(k, n);
    let pr = Priors::default();
    update_sigma2(&mut s, &d, &pr);
    update_tau2(&mut s, &d, &pr).unwrap();
    assert_eq!(s.la1, 149.0);
    assert_eq!(s.la2, 149.0);
}

#[test]
fn tau2_perfect_fit_reduces_to_prior_scale() {
    let x = vec![1.0, -2.0, 0.5, 3.0];
    let y: Vec<f64> = x.iter().map(|v| 1.5 * v).collect();
    let d = Dataset::new(line_points(4), x, y, 2, 2).unwrap();
    let mut s = plain_state(2, 4);
    s.mu_beta = 1.5;
    s.sigma2_beta_q = 0.0;
    s.sigma_w = DMatrix::zeros(4, 4);
    let pr = Priors::default();
    let er = update_tau2(&mut s, &d, &pr).unwrap();
    assert!(er.total().abs() < 1e-24);
    assert_eq!(s.lb2, pr.b2);
}

#[test]
fn expected_residual_matches_monte_carlo() {
    // moments of a two-point mixture of permutations, computed exactly
    let d = identity_data(3, 3, 4);
    let mut s = plain_state(3, 12);
    let p = Permutation::new(vec![1, 0, 2]).unwrap().to_matrix();
    let eye = DMatrix::<f64>::identity(3, 3);
    s.moments_x = PermMoments { mstar: (&eye + &p) * 0.5, vstar: (eye.tr_mul(&eye) + p.tr_mul(&p)) * 0.5 };
    s.mu_beta = 2.0;
    s.sigma2_beta_q = 0.3;
    s.mu_w = DVector::from_fn(12, |i, _| (i as f64 * 0.7).sin());
    s.sigma_w = DMatrix::identity(12, 12) * 0.2;
    let got = expected_residual(&s, &d).total();
    // E over pi in {I, P} (prob 1/2 each), beta ~ (2, 0.3), W ~ (mu, 0.2 I), M_S = I
    let mut want = 0.0;
    for pm in [&eye, &p] {
        for i in 0..d.b {
            let x = DVector::from_column_slice(&d.x[i * 3..i * 3 + 3]);
            let y = DVector::from_column_slice(&d.y[i * 3..i * 3 + 3]);
            let mu = s.mu_w.rows(i * 3, 3);
            let px = pm * &x;
            let r = &y - &px * 2.0 - mu;
            want += 0.5 * (r.norm_squared() + 0.3 * px.norm_squared() + 0.2 * 3.0);
        }
    }
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn phi_single_point_average_is_one() {
    let pts = line_points(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let parts = PhiParticles::draw(&pts, 8, 1 << 20, &mut rng).unwrap();
    let mut s = plain_state(1, 1);
    s.phi_weights = vec![0.125; 8];
    update_phi(&mut s, &parts).unwrap();
    assert!((s.er_inv[(0, 0)] - 1.0).abs() < 1e-12);
    let sum: f64 = s.phi_weights.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    assert!(parts.phis.iter().all(|&p| p > 0.0 && p <= PHI_UPPER));
}

#[test]
fn cached_and_on_demand_particles_agree() {
    let pts = line_points(6);
    let phis = vec![0.2, 0.7, 1.3];
    let a = PhiParticles::from_phis(&pts, phis.clone(), 1 << 20).unwrap();
    let b = PhiParticles::from_phis(&pts, phis, 0).unwrap();
    assert!(a.is_cached() && !b.is_cached());
    let w = [0.2, 0.5, 0.3];
    assert!((a.weighted_inverse(&w).unwrap() - b.weighted_inverse(&w).unwrap()).norm() < 1e-12);
}

#[test]
fn extraction_of_exact_and_noisy_permutations() {
    let p = Permutation::new(vec![2, 0, 3, 1]).unwrap();
    let q = Permutation::new(vec![1, 0, 2, 3]).unwrap();
    let mut s = plain_state(4, 4);
    s.moments_x = PermMoments::degenerate(&p.to_matrix());
    s.moments_s = PermMoments::degenerate(&q.to_matrix());
    assert_eq!(extract_permutations(&s).unwrap(), (p.clone(), q.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::Rng;
    for _ in 0..50 {
        s.moments_x.mstar = p.to_matrix().map(|v| v + rng.random_range(-0.1..0.1));
        s.moments_s.mstar = q.to_matrix().map(|v| v + rng.random_range(-0.1..0.1));
        assert_eq!(extract_permutations(&s).unwrap(), (p.clone(), q.clone()));
    }
}

#[test]
fn straight_through_gradient_matches_finite_differences() {
    let d = identity_data(11, 3, 9);
    let mut s = plain_state(3, 27);
    s.mu_beta = 7.0;
    let obj = objective_x(&s, &d, &Priors::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    use rand::Rng;
    let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let params = RelaxedPermParams::new(m, DMatrix::from_element(3, 3, 0.05), 0.6).unwrap();
    let sampler = RelaxedSampler::new(&params).unwrap();
    let noises: Vec<_> = (0..64).map(|_| sampler.draw_noise(&mut rng)).collect();
    let (gm, gv) = mc_gradient(&obj, &params, &noises).unwrap();
    let h = 1e-5;
    for r in 0..3 {
        for c in 0..3 {
            let mut p = params.clone();
            let mut q = params.clone();
            p.m[(r, c)] += h;
            q.m[(r, c)] -= h;
            let fd = (mc_objective(&obj, &p, &noises).unwrap() - mc_objective(&obj, &q, &noises).unwrap()) / (2.0 * h);
            assert!((fd - gm[(r, c)]).abs() <= 1e-4 * fd.abs().max(1.0), "M {r},{c}: {fd} vs {}", gm[(r, c)]);
            let mut p = params.clone();
            let mut q = params.clone();
            p.v[(r, c)] += h;
            q.v[(r, c)] -= h;
            let fd = (mc_objective(&obj, &p, &noises).unwrap() - mc_objective(&obj, &q, &noises).unwrap()) / (2.0 * h);
            assert!((fd - gv[(r, c)]).abs() <= 1e-4 * fd.abs().max(1.0), "V {r},{c}: {fd} vs {}", gv[(r, c)]);
        }
    }
}

#[test]
fn closed_form_steps_never_decrease_elbo() {
    let d = identity_data(21, 4, 9).without_truth();
    let cfg = FitConfig { freeze_permutations: true, phi_is_samples: 16, ..FitConfig::default() };
    let mut sess = FitSession::new(&d, &Priors::default(), &cfg).unwrap();
    let mut prev = sess.elbo();
    for _ in 0..30 {
        sess.closed_form_steps().unwrap();
        let e = sess.elbo();
        assert!(e - prev >= -1e-6 * prev.abs().max(1.0), "{prev} -> {e}");
        prev = e;
    }
}

#[test]
fn identity_start_is_retained_on_unshuffled_data() {
    let d = identity_data(4, 4, 25).without_truth();
    let cfg = FitConfig { perm_inner_steps: 25, ..FitConfig::default() };
    let mut sess = FitSession::new(&d, &Priors::default(), &cfg).unwrap();
    for _ in 0..2 {
        sess.closed_form_steps().unwrap();
        sess.permutation_step().unwrap();
    }
    let mx = &sess.state.moments_x.mstar;
    for r in 0..4 {
        let arg = (0..4).max_by(|&a, &b| mx[(r, a)].total_cmp(&mx[(r, b)])).unwrap();
        assert_eq!(arg, r, "{mx}");
    }
}

#[test]
fn fit_recovers_beta_on_identity_data() {
    let d = identity_data(8, 4, 25).without_truth();
    let rep = fit(&d, &Priors::default(), &FitConfig::default()).unwrap();
    assert!((rep.beta_mean - 8.0).abs() / 8.0 < 0.1, "{}", rep.beta_mean);
    assert!(rep.elbo_trace.iter().all(|e| e.is_finite()));
}

#[test]
fn fit_is_deterministic_per_seed() {
    let d = identity_data(9, 3, 9).without_truth();
    let cfg = FitConfig { max_outer_iters: 8, seed: 17, ..FitConfig::default() };
    let a = fit(&d, &Priors::default(), &cfg).unwrap();
    let b = fit(&d, &Priors::default(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_round_trips_through_record() {
    let d = identity_data(10, 2, 4).without_truth();
    let cfg = FitConfig { max_outer_iters: 3, ..FitConfig::default() };
    let rep = fit(&d, &Priors::default(), &cfg).unwrap();
    let rec = crate::record::Record::parse(&rep.to_record().to_string()).unwrap();
    assert_eq!(rec.get("beta_mean").unwrap().parse::<f64>().unwrap(), rep.beta_mean);
    let mut buf = Vec::new();
    rep.write_elbo_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), rep.elbo_trace.len() + 1);
}

#[test]
fn config_validation() {
    assert!(FitConfig::default().validate().is_ok());
    assert!(FitConfig { tau_min: 0.0, ..FitConfig::default() }.validate().is_err());
    assert!(FitConfig { anneal_rate: 1.0, ..FitConfig::default() }.validate().is_err());
    assert!(FitConfig { mc_samples: 0, ..FitConfig::default() }.validate().is_err());
    assert!(FitConfig { v_max: 0.01, ..FitConfig::default() }.validate().is_err());
}
