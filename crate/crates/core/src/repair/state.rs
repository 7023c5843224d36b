use nalgebra::{DMatrix, DVector};

use crate::permops::{PermMoments, RelaxedPermParams};

/// Hyperparameters of the prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Priors {
    pub sigma2_beta: f64,
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub eta_x2: f64,
    pub eta_s2: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self { sigma2_beta: 100.0, a1: 2.0, b1: 2.0, a2: 2.0, b2: 2.0, eta_x2: 0.1, eta_s2: 0.1 }
    }
}

impl Priors {
    pub fn validate(&self) -> crate::Result<()> {
        let vals = [self.sigma2_beta, self.a1, self.b1, self.a2, self.b2, self.eta_x2, self.eta_s2];
        if vals.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("priors must be positive: {self:?}")))
        }
    }
}

/// Parameters of the mean-field posterior and the cached expectations the
/// coordinate updates share.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mu_beta: f64,
    pub sigma2_beta_q: f64,
    pub mu_w: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
    pub logdet_sigma_w: f64,
    pub la1: f64,
    pub lb1: f64,
    pub la2: f64,
    pub lb2: f64,
    /// Weighted average of `R(phi_j)^{-1}` over the range particles.
    pub er_inv: DMatrix<f64>,
    /// Particle weights of the range factor (sum to one).
    pub phi_weights: Vec<f64>,
    pub zeta_x: RelaxedPermParams,
    pub zeta_s: RelaxedPermParams,
    pub moments_x: PermMoments,
    pub moments_s: PermMoments,
    /// Monte-Carlo `E[log p(pi)]` from the draws behind the moments.
    pub log_prior_x: f64,
    pub log_prior_s: f64,
    pub global_step: usize,
}

impl VariationalState {
    pub fn precision_sigma(&self) -> f64 {
        self.la1 / self.lb1
    }

    pub fn precision_tau(&self) -> f64 {
        self.la2 / self.lb2
    }

    /// Posterior mean of an Inverse-Gamma factor, `b / (a - 1)`.
    pub fn sigma2_mean(&self) -> f64 {
        ig_mean(self.la1, self.lb1)
    }

    pub fn tau2_mean(&self) -> f64 {
        ig_mean(self.la2, self.lb2)
    }

    pub fn n(&self) -> usize {
        self.mu_w.len()
    }

    pub fn k(&self) -> usize {
        self.zeta_x.k()
    }
}

pub(crate) fn ig_mean(a: f64, b: f64) -> f64 {
    if a > 1.0 {
        b / (a - 1.0)
    } else {
        f64::NAN
    }
}
