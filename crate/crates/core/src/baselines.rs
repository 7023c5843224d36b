//! Maximum-likelihood Gaussian-process baselines.
//!
//! `FullGP` fits the correctly linked data; `ArealGP` fits block means at
//! block centroids. Both maximize the exponential-kernel likelihood with
//! `beta` profiled out by GLS, searching over
//! `(ln sigma2, ln tau2, logit(phi / sqrt 2))` with Nelder-Mead.

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};

use crate::covkernel::{build_sigma, chol_factor, exp_correlation, CovarianceParams, DomainPoints};
use crate::error::{Error, Result};
use crate::record::Record;
use crate::simulate::{unshuffle_with_truth, Dataset};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Range values are searched on `(0, PHI_MAX)`.
pub const PHI_MAX: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct GLSFit {
    pub beta_hat: f64,
    pub cov_hat: CovarianceParams,
    pub neg_loglik: f64,
    pub n_evals: u64,
    pub converged: bool,
}

impl GLSFit {
    pub fn to_record(&self, method: &str) -> Record {
        let mut r = Record::new();
        r.push("method", method);
        r.push_f64("beta_hat", self.beta_hat);
        r.push_f64("sigma2_hat", self.cov_hat.sigma2);
        r.push_f64("phi_hat", self.cov_hat.phi);
        r.push_f64("tau2_hat", self.cov_hat.tau2);
        r.push_f64("neg_loglik", self.neg_loglik);
        r.push("n_evals", self.n_evals.to_string());
        r.push("converged", self.converged.to_string());
        r
    }
}

/// Options for the simplex search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iters: u64,
    /// Stop once the standard deviation of simplex costs falls below this.
    pub sd_tolerance: f64,
    /// Edge length of the initial simplex in transformed coordinates.
    pub step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self { max_iters: 2000, sd_tolerance: 1e-9, step: 0.5 }
    }
}

/// GLS coefficient and Gaussian negative log-likelihood of `y - x beta`
/// under a fixed covariance `sigma`, with `beta` at its GLS value.
pub fn profile_gls(x: &DVector<f64>, y: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = x.len();
    if y.len() != n || sigma.nrows() != n {
        return Err(Error::Dimension { expected: n, got: y.len().min(sigma.nrows()) });
    }
    let c = chol_factor(sigma)?;
    let xt = c.whiten(x);
    let yt = c.whiten(y);
    let xx = xt.norm_squared();
    if !(xx > 0.0) {
        return Err(Error::DegenerateDesign);
    }
    let beta = xt.dot(&yt) / xx;
    let rss = (yt - xt * beta).norm_squared();
    Ok((beta, 0.5 * (n as f64 * LN_2PI + c.log_det() + rss)))
}

fn to_theta(c: &CovarianceParams) -> Vec<f64> {
    let u = (c.phi / PHI_MAX).clamp(1e-6, 1.0 - 1e-6);
    vec![c.sigma2.ln(), c.tau2.ln(), (u / (1.0 - u)).ln()]
}

fn from_theta(t: &[f64]) -> CovarianceParams {
    let u = 1.0 / (1.0 + (-t[2]).exp());
    CovarianceParams { sigma2: t[0].exp(), tau2: t[1].exp(), phi: PHI_MAX * u }
}

struct Likelihood<'a> {
    points: &'a DomainPoints,
    x: DVector<f64>,
    y: DVector<f64>,
}

impl Likelihood<'_> {
    fn eval(&self, cov: &CovarianceParams) -> Result<(f64, f64)> {
        cov.validate()?;
        let r = exp_correlation(self.points, cov.phi)?;
        profile_gls(&self.x, &self.y, &build_sigma(&r, cov))
    }
}

impl CostFunction for Likelihood<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, t: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        // an infeasible corner ranks last instead of aborting the search
        Ok(match self.eval(&from_theta(t)) {
            Ok((_, nll)) if nll.is_finite() => nll,
            _ => f64::INFINITY,
        })
    }
}

/// Maximum-likelihood fit of `y = x beta + W + eps` at `points`.
pub fn gp_fit(
    points: &DomainPoints,
    x: &[f64],
    y: &[f64],
    init: &CovarianceParams,
    opts: &OptimOptions,
) -> Result<GLSFit> {
    init.validate()?;
    let n = points.len();
    if x.len() != n || y.len() != n {
        return Err(Error::Dimension { expected: n, got: x.len().min(y.len()) });
    }
    let lik = Likelihood { points, x: DVector::from_column_slice(x), y: DVector::from_column_slice(y) };
    let (_, nll0) = lik.eval(init)?;
    let t0 = to_theta(init);
    let mut simplex = vec![t0.clone()];
    for i in 0..t0.len() {
        let mut t = t0.clone();
        t[i] += opts.step;
        simplex.push(t);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.sd_tolerance)
        .map_err(|e| Error::Config(e.to_string()))?;
    let res = Executor::new(lik, solver)
        .configure(|s| s.max_iters(opts.max_iters))
        .run()
        .map_err(|e| Error::State(format!("optimizer failed: {e}")))?;
    let state = res.state();
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    let n_evals = state.get_func_counts().get("cost_count").copied().unwrap_or(0);
    let (cov, nll) = match state.get_best_param() {
        Some(t) if state.get_best_cost() <= nll0 => (from_theta(t), state.get_best_cost()),
        _ => (*init, nll0),
    };
    let lik = &res.problem.problem.as_ref().expect("problem is returned");
    let (beta, nll) = lik.eval(&cov).map(|(b, _)| (b, nll))?;
    Ok(GLSFit { beta_hat: beta, cov_hat: cov, neg_loglik: nll, n_evals, converged })
}

/// Posterior mean of the latent field, `sigma2 R (Sigma)^{-1} (y - x beta)`,
/// at the fitted parameters.
pub fn kriging_field(points: &DomainPoints, x: &[f64], y: &[f64], fit: &GLSFit) -> Result<Vec<f64>> {
    let n = points.len();
    if x.len() != n || y.len() != n {
        return Err(Error::Dimension { expected: n, got: x.len().min(y.len()) });
    }
    let r = exp_correlation(points, fit.cov_hat.phi)?;
    let sigma = build_sigma(&r, &fit.cov_hat);
    let resid = DVector::from_iterator(n, x.iter().zip(y).map(|(x, y)| y - x * fit.beta_hat));
    let alpha = chol_factor(&sigma)?.solve_vec(&resid);
    Ok((r.entries * alpha * fit.cov_hat.sigma2).as_slice().to_vec())
}

/// Oracle fit: undoes the true shuffles, then fits the linked data.
pub fn full_gp_fit(data: &Dataset, init: &CovarianceParams) -> Result<GLSFit> {
    full_gp_fit_with(data, init, &OptimOptions::default())
}

pub fn full_gp_fit_with(data: &Dataset, init: &CovarianceParams, opts: &OptimOptions) -> Result<GLSFit> {
    if data.truth.is_none() {
        return Err(Error::Input("FullGP needs the true permutations".into()));
    }
    let u = unshuffle_with_truth(data)?;
    gp_fit(&u.points, &u.x, &u.y, init, opts)
}

/// Mean summed in sorted order, so it does not depend on the input order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Block means of exposure and outcome, and block centroids. Each mean is
/// bit-for-bit invariant to reordering rows within a block.
pub fn aggregate_blocks(data: &Dataset) -> Result<(DomainPoints, Vec<f64>, Vec<f64>)> {
    data.validate()?;
    let mut coords = Vec::with_capacity(data.b);
    let mut xm = Vec::with_capacity(data.b);
    let mut ym = Vec::with_capacity(data.b);
    for blk in 0..data.b {
        let r = data.block_range(blk);
        let pts = &data.points.coords[r.clone()];
        coords.push([
            order_free_mean(pts.iter().map(|p| p[0]).collect()),
            order_free_mean(pts.iter().map(|p| p[1]).collect()),
        ]);
        xm.push(order_free_mean(data.x[r.clone()].to_vec()));
        ym.push(order_free_mean(data.y[r].to_vec()));
    }
    Ok((DomainPoints::new(coords)?, xm, ym))
}

/// Aggregation baseline. Needs at least two blocks.
pub fn areal_gp_fit(data: &Dataset, init: &CovarianceParams) -> Result<GLSFit> {
    areal_gp_fit_with(data, init, &OptimOptions::default())
}

pub fn areal_gp_fit_with(data: &Dataset, init: &CovarianceParams, opts: &OptimOptions) -> Result<GLSFit> {
    if data.b < 2 {
        return Err(Error::Input(format!("ArealGP needs at least 2 blocks, got {}", data.b)));
    }
    let (pts, xm, ym) = aggregate_blocks(data)?;
    gp_fit(&pts, &xm, &ym, init, opts)
}
