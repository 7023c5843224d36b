use nalgebra::{DMatrix, DVector, DVectorView};

use super::state::{Priors, VariationalState};
use crate::covkernel::chol_jittered;
use crate::error::{Error, Result};
use crate::simulate::Dataset;

pub(crate) fn block<'a>(v: &'a [f64], k: usize, i: usize) -> DVectorView<'a, f64> {
    DVectorView::from_slice(&v[i * k..(i + 1) * k], k)
}

/// The five pieces of `sum_i E[r_i^T r_i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedResidual {
    /// Squared residual at the posterior means.
    pub t1: f64,
    /// `mu_beta^2 X^T (V*_X - M*_X^T M*_X) X`.
    pub t2: f64,
    /// `sigma2_beta_q X^T V*_X X`.
    pub t3: f64,
    /// `mu_W^T (V*_S - M*_S^T M*_S) mu_W`.
    pub t4: f64,
    /// `tr(V*_S Sigma_W,ii)` summed over blocks.
    pub t5: f64,
}

impl ExpectedResidual {
    pub fn total(&self) -> f64 {
        self.t1 + self.t2 + self.t3 + self.t4 + self.t5
    }
}

pub fn expected_residual(state: &VariationalState, data: &Dataset) -> ExpectedResidual {
    let (k, b) = (data.k, data.b);
    let mx = &state.moments_x.mstar;
    let vx = &state.moments_x.vstar;
    let ms = &state.moments_s.mstar;
    let vs = &state.moments_s.vstar;
    let dvx = vx - mx.tr_mul(mx);
    let dvs = vs - ms.tr_mul(ms);
    let mb = state.mu_beta;
    let mut r = ExpectedResidual { t1: 0.0, t2: 0.0, t3: 0.0, t4: 0.0, t5: 0.0 };
    for i in 0..b {
        let x = block(&data.x, k, i);
        let y = block(&data.y, k, i);
        let mu = state.mu_w.rows(i * k, k);
        let res = y - mx * x * mb - ms * mu;
        r.t1 += res.norm_squared();
        r.t2 += mb * mb * x.dot(&(&dvx * x));
        r.t3 += state.sigma2_beta_q * x.dot(&(vx * x));
        r.t4 += mu.dot(&(&dvs * mu));
        let sw = state.sigma_w.view((i * k, i * k), (k, k));
        r.t5 += vs.component_mul(&sw).sum();
    }
    r
}

/// Gaussian factor of `beta`.
pub fn update_beta(state: &mut VariationalState, data: &Dataset, priors: &Priors) -> Result<()> {
    let (k, b) = (data.k, data.b);
    let mx = &state.moments_x.mstar;
    let vx = &state.moments_x.vstar;
    let ms = &state.moments_s.mstar;
    let ptau = state.precision_tau();
    let mut quad = 0.0;
    let mut lin = 0.0;
    for i in 0..b {
        let x = block(&data.x, k, i);
        let y = block(&data.y, k, i);
        let mu = state.mu_w.rows(i * k, k);
        let q = x.dot(&(vx * x));
        if q < -1e-10 * x.norm_squared().max(1.0) {
            return Err(Error::State(format!("V*_X is not positive semidefinite (block {i})")));
        }
        quad += q;
        lin += (mx * x).dot(&(y - ms * mu));
    }
    let s2 = 1.0 / (ptau * quad.max(0.0) + 1.0 / priors.sigma2_beta);
    state.sigma2_beta_q = s2;
    state.mu_beta = s2 * ptau * lin;
    Ok(())
}

/// Gaussian factor of `W`. Precision is
/// `ptau (I_B kron V*_S) + psig E[R^{-1}]`.
pub fn update_w(state: &mut VariationalState, data: &Dataset, _priors: &Priors) -> Result<()> {
    let (k, b) = (data.k, data.b);
    let n = k * b;
    let ptau = state.precision_tau();
    let psig = state.precision_sigma();
    let mx = &state.moments_x.mstar;
    let ms = &state.moments_s.mstar;
    let vs = &state.moments_s.vstar;
    let mut prec = &state.er_inv * psig;
    let mut rhs = DVector::zeros(n);
    for i in 0..b {
        let o = i * k;
        let mut view = prec.view_mut((o, o), (k, k));
        view += vs * ptau;
        let x = block(&data.x, k, i);
        let y = block(&data.y, k, i);
        let r = ms.tr_mul(&(y - mx * x * state.mu_beta)) * ptau;
        rhs.rows_mut(o, k).copy_from(&r);
    }
    let chol = chol_jittered(&prec)?;
    state.mu_w = chol.solve_vec(&rhs);
    state.sigma_w = chol.inverse();
    state.logdet_sigma_w = -chol.log_det();
    Ok(())
}

/// `tr(E[R^{-1}] Sigma_W) + mu_W^T E[R^{-1}] mu_W`.
pub(crate) fn w_quadratic(er_inv: &DMatrix<f64>, mu_w: &DVector<f64>, sigma_w: &DMatrix<f64>) -> f64 {
    er_inv.component_mul(sigma_w).sum() + mu_w.dot(&(er_inv * mu_w))
}

/// Inverse-Gamma factor of `sigma^2`.
pub fn update_sigma2(state: &mut VariationalState, data: &Dataset, priors: &Priors) {
    let n = data.n() as f64;
    state.la1 = n / 2.0 + priors.a1;
    state.lb1 = 0.5 * w_quadratic(&state.er_inv, &state.mu_w, &state.sigma_w) + priors.b1;
}

/// Inverse-Gamma factor of `tau^2`.
pub fn update_tau2(state: &mut VariationalState, data: &Dataset, priors: &Priors) -> Result<ExpectedResidual> {
    let n = data.n() as f64;
    let er = expected_residual(state, data);
    let lb2 = 0.5 * er.total() + priors.b2;
    if !(lb2 > 0.0) || !lb2.is_finite() {
        return Err(Error::State(format!("expected residual is inconsistent: {er:?}")));
    }
    state.la2 = n / 2.0 + priors.a2;
    state.lb2 = lb2;
    Ok(er)
}
