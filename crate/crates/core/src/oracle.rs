//! Exhaustive GLS maximum likelihood over small permutation spaces.
//!
//! The pair `(pi1, pi2)` relates to `(pi_x, pi_s)` by
//! `pi1 = pi_s^T pi_x` and `pi2 = pi_s^T`, so that
//! `pi2 Y = pi1 X beta + noise` with noise covariance `Sigma`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covkernel::{
    build_sigma, chol_jittered, exp_correlation, snr, CholFactor, CovarianceParams,
};
use crate::error::{Error, Result};
use crate::permops::{apply_blocks, Permutation};
use crate::seeding::replicate_seed;
use crate::simulate::{generate_domain_grid, grid_columns, simulate_on, Dataset, PermSpec, SimConfig};

pub const DEFAULT_K_LIMIT: usize = 5;

/// Converts `(pi_x, pi_s)` to `(pi1, pi2)`.
pub fn to_pi12(pi_x: &Permutation, pi_s: &Permutation) -> (Permutation, Permutation) {
    let inv_s = pi_s.inverse();
    (inv_s.compose(pi_x), inv_s)
}

/// Converts `(pi1, pi2)` back to `(pi_x, pi_s)`.
pub fn from_pi12(pi1: &Permutation, pi2: &Permutation) -> (Permutation, Permutation) {
    let pi_s = pi2.inverse();
    (pi_s.compose(pi1), pi_s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l: f64,
    pub l1: f64,
    pub l2: f64,
}

/// GLS problem with a fixed covariance; whitening uses the Cholesky factor,
/// which gives the same norms and projections as the symmetric root.
#[derive(Debug, Clone)]
pub struct GlsProblem {
    k: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    chol: CholFactor,
}

impl GlsProblem {
    pub fn new(data: &Dataset, sigma: &DMatrix<f64>) -> Result<Self> {
        let n = data.n();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::Dimension { expected: n, got: sigma.nrows() });
        }
        Ok(Self { k: data.k, x: data.x.clone(), y: data.y.clone(), chol: chol_jittered(sigma)? })
    }

    pub fn whitened_x(&self, pi1: &Permutation) -> DVector<f64> {
        let mut v = apply_blocks(pi1, &self.x);
        self.chol.forward_in_place(&mut v);
        DVector::from_vec(v)
    }

    pub fn whitened_y(&self, pi2: &Permutation) -> DVector<f64> {
        let mut v = apply_blocks(pi2, &self.y);
        self.chol.forward_in_place(&mut v);
        DVector::from_vec(v)
    }

    fn check(&self, p: &Permutation) -> Result<()> {
        if p.len() != self.k {
            return Err(Error::Dimension { expected: self.k, got: p.len() });
        }
        Ok(())
    }

    pub fn profile_beta(&self, pi1: &Permutation, pi2: &Permutation) -> Result<f64> {
        self.check(pi1)?;
        self.check(pi2)?;
        let xt = self.whitened_x(pi1);
        let xx = xt.dot(&xt);
        if xx <= 0.0 {
            return Err(Error::DegenerateDesign);
        }
        Ok(xt.dot(&self.whitened_y(pi2)) / xx)
    }

    pub fn loss(&self, pi1: &Permutation, pi2: &Permutation, beta: f64) -> Result<LossParts> {
        self.check(pi1)?;
        self.check(pi2)?;
        let xt = self.whitened_x(pi1);
        let yt = self.whitened_y(pi2);
        let xx = xt.dot(&xt);
        if xx <= 0.0 {
            return Err(Error::DegenerateDesign);
        }
        let bhat = xt.dot(&yt) / xx;
        let proj = &xt * bhat;
        let l1 = (&yt - &proj).norm_squared();
        let l2 = (&proj - &xt * beta).norm_squared();
        let l = (&yt - &xt * beta).norm_squared();
        Ok(LossParts { l, l1, l2 })
    }
}

pub fn gls_loss(
    data: &Dataset,
    sigma: &DMatrix<f64>,
    pi1: &Permutation,
    pi2: &Permutation,
    beta: f64,
) -> Result<LossParts> {
    GlsProblem::new(data, sigma)?.loss(pi1, pi2, beta)
}

pub fn profile_beta(
    data: &Dataset,
    sigma: &DMatrix<f64>,
    pi1: &Permutation,
    pi2: &Permutation,
) -> Result<f64> {
    GlsProblem::new(data, sigma)?.profile_beta(pi1, pi2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleSolution {
    pub pi1_hat: Permutation,
    pub pi2_hat: Permutation,
    pub beta_hat: f64,
    /// Minimal `L1` over all pairs.
    pub loss: f64,
    /// Every pair whose `L1` is within `1e-9 * max(1, loss)` of the optimum,
    /// in enumeration order (the first one is the returned pair).
    pub ties: Vec<(Permutation, Permutation)>,
}

impl MleSolution {
    pub fn permutations(&self) -> (Permutation, Permutation) {
        from_pi12(&self.pi1_hat, &self.pi2_hat)
    }
}

/// Minimizes `L1` over all `(K!)^2` pairs and profiles `beta` at the optimum.
pub fn brute_force_mle(data: &Dataset, sigma: &DMatrix<f64>, k_limit: usize) -> Result<MleSolution> {
    if data.k > k_limit {
        return Err(Error::TooLarge { k: data.k, limit: k_limit });
    }
    let prob = GlsProblem::new(data, sigma)?;
    let perms = Permutation::all(data.k);
    let xs: Vec<DVector<f64>> = perms.par_iter().map(|p| prob.whitened_x(p)).collect();
    let ys: Vec<DVector<f64>> = perms.par_iter().map(|p| prob.whitened_y(p)).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v.dot(v)).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v.dot(v)).collect();
    if xx.iter().any(|&v| v <= 0.0) {
        return Err(Error::DegenerateDesign);
    }
    // L1 = |Y|^2 - (X.Y)^2 / |X|^2, independent of beta
    let losses: Vec<Vec<f64>> = xs
        .par_iter()
        .zip(&xx)
        .map(|(x, &xxi)| {
            ys.iter()
                .zip(&yy)
                .map(|(y, &yyj)| {
                    let xy = x.dot(y);
                    (yyj - xy * xy / xxi).max(0.0)
                })
                .collect()
        })
        .collect();
    let best = losses.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut ties = Vec::new();
    for (i, row) in losses.iter().enumerate() {
        for (j, &l) in row.iter().enumerate() {
            if l <= best + tol {
                ties.push((perms[i].clone(), perms[j].clone()));
            }
        }
    }
    // report the lexicographically first optimal pair
    let (pi1_hat, pi2_hat) = ties[0].clone();
    let beta_hat = prob.profile_beta(&pi1_hat, &pi2_hat)?;
    Ok(MleSolution { pi1_hat, pi2_hat, beta_hat, loss: best, ties })
}

/// Strength of the regression signal in a recovery cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal {
    Beta(f64),
    /// Target SNR; `beta` is set per replicate from the realized `Sigma`.
    Snr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryCell {
    pub k: usize,
    pub b: usize,
    pub signal: Signal,
    pub cov: CovarianceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRow {
    pub k: usize,
    pub b: usize,
    /// Mean true `beta` across replicates.
    pub beta: f64,
    pub cov: CovarianceParams,
    /// Mean realized SNR.
    pub snr: f64,
    /// Fraction of replicates whose returned pair equals the truth.
    pub recovery_rate: f64,
    /// Fraction whose optimal tie set contains the truth.
    pub tie_recovery_rate: f64,
    /// Fraction recovering `pi1` alone.
    pub pi1_recovery_rate: f64,
    pub beta_mae: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ReplicateOutcome {
    beta: f64,
    snr: f64,
    exact: bool,
    in_ties: bool,
    pi1_ok: bool,
    abs_err: f64,
}

fn run_replicate(cell: &RecoveryCell, seed: u64) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = generate_domain_grid(cell.b, cell.k, grid_columns(cell.b), &mut rng)?;
    let r = exp_correlation(&points, cell.cov.phi)?;
    let sigma = build_sigma(&r, &cell.cov);
    let chol = chol_jittered(&(r.entries * cell.cov.sigma2))?;
    let beta = match cell.signal {
        Signal::Beta(b) => b,
        Signal::Snr(target) => {
            // SNR scales as beta^2
            let unit = snr(1.0, &sigma)?;
            (target / unit).sqrt()
        }
    };
    let config = SimConfig {
        k: cell.k,
        b: cell.b,
        beta,
        cov: cell.cov,
        perm_x: PermSpec::RandomHamming,
        perm_s: PermSpec::RandomHamming,
        seed,
    };
    let data = simulate_on(&config, &points, &chol, &mut rng)?;
    let truth = data.truth.clone().expect("simulated data carry truth");
    let (t1, t2) = to_pi12(&truth.pi_x, &truth.pi_s);
    let sol = brute_force_mle(&data.without_truth(), &sigma, DEFAULT_K_LIMIT)?;
    Ok(ReplicateOutcome {
        beta,
        snr: snr(beta, &sigma)?,
        exact: sol.pi1_hat == t1 && sol.pi2_hat == t2,
        in_ties: sol.ties.iter().any(|(a, b)| *a == t1 && *b == t2),
        pi1_ok: sol.pi1_hat == t1,
        abs_err: (sol.beta_hat - beta).abs(),
    })
}

/// Runs `replicates` brute-force fits per cell. Replicate seeds derive from
/// `(seed, cell index, replicate index)`, so results do not depend on
/// scheduling.
pub fn recovery_experiment(
    grid: &[RecoveryCell],
    replicates: usize,
    seed: u64,
) -> Result<Vec<RecoveryRow>> {
    if replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    for c in grid {
        if c.k > DEFAULT_K_LIMIT {
            return Err(Error::TooLarge { k: c.k, limit: DEFAULT_K_LIMIT });
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (ci, cell) in grid.iter().enumerate() {
        let outcomes: Vec<ReplicateOutcome> = (0..replicates)
            .into_par_iter()
            .map(|rep| run_replicate(cell, replicate_seed(seed, ci as u64, rep as u64)))
            .collect::<Result<_>>()?;
        let m = replicates as f64;
        let frac = |f: fn(&ReplicateOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / m;
        rows.push(RecoveryRow {
            k: cell.k,
            b: cell.b,
            beta: outcomes.iter().map(|o| o.beta).sum::<f64>() / m,
            cov: cell.cov,
            snr: outcomes.iter().map(|o| o.snr).sum::<f64>() / m,
            recovery_rate: frac(|o| o.exact),
            tie_recovery_rate: frac(|o| o.in_ties),
            pi1_recovery_rate: frac(|o| o.pi1_ok),
            beta_mae: outcomes.iter().map(|o| o.abs_err).sum::<f64>() / m,
            replicates,
        });
    }
    Ok(rows)
}

pub fn write_recovery_csv<W: Write>(rows: &[RecoveryRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["K", "B", "beta", "sigma2", "phi", "tau2", "snr", "recovery_rate", "beta_mae"])?;
    for r in rows {
        wr.write_record([
            r.k.to_string(),
            r.b.to_string(),
            r.beta.to_string(),
            r.cov.sigma2.to_string(),
            r.cov.phi.to_string(),
            r.cov.tau2.to_string(),
            r.snr.to_string(),
            r.recovery_rate.to_string(),
            r.beta_mae.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::DomainPoints;
    use crate::simulate::simulate;
    use nalgebra::SymmetricEigen;
    use rand::Rng;

    fn sym_inv_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
        let e = SymmetricEigen::new(s.clone());
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    }

    fn line_data(x: Vec<f64>, y: Vec<f64>, k: usize) -> Dataset {
        let n = x.len();
        let pts = DomainPoints::new((0..n).map(|i| [i as f64, 0.0]).collect()).unwrap();
        Dataset::new(pts, x, y, k, n / k).unwrap()
    }

    fn sim(k: usize, b: usize, beta: f64, cov: CovarianceParams, seed: u64) -> (Dataset, DMatrix<f64>) {
        let cfg = SimConfig {
            k,
            b,
            beta,
            cov,
            perm_x: PermSpec::RandomHamming,
            perm_s: PermSpec::RandomHamming,
            seed,
        };
        let d = simulate(&cfg).unwrap();
        let r = exp_correlation(&d.points, cov.phi).unwrap();
        let s = build_sigma(&r, &cov);
        (d, s)
    }

    #[test]
    fn pi12_round_trip() {
        let px = Permutation::new(vec![2, 0, 3, 1]).unwrap();
        let ps = Permutation::new(vec![1, 3, 0, 2]).unwrap();
        let (a, b) = to_pi12(&px, &ps);
        assert_eq!(a.to_matrix(), ps.to_matrix().transpose() * px.to_matrix());
        assert_eq!(b.to_matrix(), ps.to_matrix().transpose());
        assert_eq!(from_pi12(&a, &b), (px, ps));
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.7 * v).collect();
        let d = line_data(x, y, 2);
        let id = Permutation::identity(2);
        let l = gls_loss(&d, &DMatrix::identity(4, 4), &id, &id, 1.7).unwrap();
        assert!(l.l.abs() < 1e-20 && l.l1.abs() < 1e-20);
        assert!((profile_beta(&d, &DMatrix::identity(4, 4), &id, &id).unwrap() - 1.7).abs() < 1e-14);
    }

    #[test]
    fn profile_beta_scaling_and_simple_case() {
        let x = vec![1.0, 2.0, -1.0, 0.5];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let d = line_data(x.clone(), y, 2);
        let id = Permutation::identity(2);
        assert!((profile_beta(&d, &DMatrix::identity(4, 4), &id, &id).unwrap() - 3.0).abs() < 1e-14);
        let cov = CovarianceParams::new(1.0, 0.5, 0.3).unwrap();
        let (d, s) = sim(3, 4, 2.0, cov, 4);
        let p = Permutation::new(vec![1, 2, 0]).unwrap();
        let b1 = profile_beta(&d, &s, &p, &id_for(3)).unwrap();
        let mut d2 = d.clone();
        d2.y.iter_mut().for_each(|v| *v *= -2.5);
        let b2 = profile_beta(&d2, &s, &p, &id_for(3)).unwrap();
        assert!((b2 + 2.5 * b1).abs() < 1e-10 * b1.abs().max(1.0));
    }

    fn id_for(k: usize) -> Permutation {
        Permutation::identity(k)
    }

    #[test]
    fn loss_matches_unfactored_and_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = CovarianceParams::new(2.0, 0.5, 0.4).unwrap();
        let (d, s) = sim(4, 4, 1.5, cov, 9);
        let root = sym_inv_sqrt(&s);
        let perms = Permutation::all(4);
        for _ in 0..20 {
            let p1 = &perms[rng.random_range(0..24)];
            let p2 = &perms[rng.random_range(0..24)];
            let beta = rng.random_range(-3.0..3.0);
            let parts = gls_loss(&d, &s, p1, p2, beta).unwrap();
            let r = DVector::from_vec(apply_blocks(p2, &d.y)) - DVector::from_vec(apply_blocks(p1, &d.x)) * beta;
            let direct = (&root * r).norm_squared();
            assert!((parts.l - direct).abs() < 1e-9 * direct.max(1.0));
            assert!((parts.l1 + parts.l2 - parts.l).abs() < 1e-9 * parts.l.max(1.0));
            let bhat = profile_beta(&d, &s, p1, p2).unwrap();
            let at = gls_loss(&d, &s, p1, p2, bhat).unwrap();
            assert!(at.l2 < 1e-8 * at.l.max(1.0));
            for step in [-0.01, 0.01] {
                assert!(gls_loss(&d, &s, p1, p2, bhat + step).unwrap().l > at.l);
            }
        }
    }

    #[test]
    fn zero_exposure_is_degenerate() {
        let d = line_data(vec![0.0; 4], vec![1.0; 4], 2);
        let id = Permutation::identity(2);
        assert_eq!(gls_loss(&d, &DMatrix::identity(4, 4), &id, &id, 1.0), Err(Error::DegenerateDesign));
    }

    #[test]
    fn brute_force_finds_noiseless_identity() {
        let x = vec![1.0, -0.3, 2.0, 0.7, -1.2, 0.1];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = line_data(x, y, 2);
        let sol = brute_force_mle(&d, &DMatrix::identity(6, 6), 5).unwrap();
        let id = Permutation::identity(2);
        assert!(sol.ties.contains(&(id.clone(), id)));
        assert!(sol.loss < 1e-12);
    }

    #[test]
    fn brute_force_beats_truth_and_refuses_large_k() {
        let cov = CovarianceParams::new(1.0, 0.5, 0.1).unwrap();
        for seed in 0..5 {
            let (d, s) = sim(3, 9, 1.0, cov, seed);
            let t = d.truth.clone().unwrap();
            let (t1, t2) = to_pi12(&t.pi_x, &t.pi_s);
            let sol = brute_force_mle(&d, &s, 5).unwrap();
            let at_truth = gls_loss(&d, &s, &t1, &t2, 0.0).unwrap().l1;
            assert!(sol.loss <= at_truth + 1e-12);
        }
        let (d, s) = sim(6, 1, 1.0, cov, 0);
        assert!(matches!(brute_force_mle(&d, &s, 5), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn brute_force_block_relabel_invariant() {
        let cov = CovarianceParams::new(1.0, 0.5, 0.2).unwrap();
        let (d, s) = sim(3, 4, 3.0, cov, 12);
        let order = [2usize, 0, 3, 1];
        let idx: Vec<usize> = order.iter().flat_map(|&b| b * 3..b * 3 + 3).collect();
        let d2 = Dataset::new(
            d.points.gather(&idx),
            idx.iter().map(|&i| d.x[i]).collect(),
            idx.iter().map(|&i| d.y[i]).collect(),
            3,
            4,
        )
        .unwrap();
        let s2 = DMatrix::from_fn(12, 12, |i, j| s[(idx[i], idx[j])]);
        let a = brute_force_mle(&d, &s, 5).unwrap();
        let b = brute_force_mle(&d2, &s2, 5).unwrap();
        assert_eq!((a.pi1_hat, a.pi2_hat), (b.pi1_hat, b.pi2_hat));
        assert!((a.beta_hat - b.beta_hat).abs() < 1e-9);
    }

    #[test]
    fn high_snr_recovery() {
        let cov = CovarianceParams::new(1.0, 0.5, 0.01).unwrap();
        let cell = RecoveryCell { k: 3, b: 30, signal: Signal::Beta(20.0), cov };
        let rows = recovery_experiment(&[cell], 50, 17).unwrap();
        assert!(rows[0].tie_recovery_rate >= 0.9, "{:?}", rows[0]);
    }

    #[test]
    fn zero_signal_beta_error_small() {
        let cov = CovarianceParams::new(1.0, 0.5, 0.1).unwrap();
        let cell = RecoveryCell { k: 3, b: 20, signal: Signal::Beta(0.0), cov };
        let rows = recovery_experiment(&[cell], 30, 2).unwrap();
        assert!(rows[0].beta_mae < 0.2, "{:?}", rows[0]);
    }

    #[test]
    fn recovery_csv_header() {
        let cov = CovarianceParams::new(1.0, 0.5, 0.1).unwrap();
        let cell = RecoveryCell { k: 2, b: 4, signal: Signal::Snr(5.0), cov };
        let rows = recovery_experiment(&[cell], 3, 1).unwrap();
        assert!((rows[0].snr - 5.0).abs() < 1e-9);
        let mut buf = Vec::new();
        write_recovery_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("K,B,beta,sigma2,phi,tau2,snr,recovery_rate,beta_mae\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
