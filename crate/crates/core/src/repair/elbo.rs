use statrs::function::gamma::{digamma, ln_gamma};

use super::phi::PhiParticles;
use super::state::{Priors, VariationalState};
use super::updates::{expected_residual, w_quadratic};
use crate::permops::relaxed_entropy;
use crate::simulate::Dataset;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Entropy of `InvGamma(a, b)`.
pub fn inv_gamma_entropy(a: f64, b: f64) -> f64 {
    a + b.ln() + ln_gamma(a) - (1.0 + a) * digamma(a)
}

/// `E_q[log InvGamma(x; a0, b0)]` for `q = InvGamma(a, b)`.
fn inv_gamma_cross(a0: f64, b0: f64, a: f64, b: f64) -> f64 {
    let e_log = b.ln() - digamma(a);
    a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * e_log - b0 * a / b
}

pub fn gaussian_entropy(dim: usize, logdet: f64) -> f64 {
    0.5 * (dim as f64 * (LN_2PI + 1.0) + logdet)
}

/// Individual ELBO contributions, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub likelihood: f64,
    pub field: f64,
    pub range: f64,
    pub beta_prior: f64,
    pub variance_priors: f64,
    pub perm_priors: f64,
    pub entropies: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.field
            + self.range
            + self.beta_prior
            + self.variance_priors
            + self.perm_priors
            + self.entropies
    }
}

/// ELBO of the current state. Monte-Carlo pieces (permutation moments and
/// prior expectations) come from the draws cached in the state, so the value
/// is a deterministic function of the state.
///
/// The range factor is a weighted particle set with a uniform prior over the
/// particles; its expected log density, prior and entropy are all included.
pub fn elbo_terms(
    state: &VariationalState,
    data: &Dataset,
    priors: &Priors,
    particles: &PhiParticles,
) -> ElboTerms {
    let n = data.n() as f64;
    let (la1, lb1, la2, lb2) = (state.la1, state.lb1, state.la2, state.lb2);
    let e_log_tau2 = lb2.ln() - digamma(la2);
    let e_log_sigma2 = lb1.ln() - digamma(la1);

    let er = expected_residual(state, data).total();
    let likelihood = -0.5 * n * LN_2PI - 0.5 * n * e_log_tau2 - 0.5 * (la2 / lb2) * er;

    let quad = w_quadratic(&state.er_inv, &state.mu_w, &state.sigma_w);
    let field = -0.5 * n * LN_2PI - 0.5 * n * e_log_sigma2 - 0.5 * (la1 / lb1) * quad;

    let w = &state.phi_weights;
    let p = particles.len() as f64;
    let e_logdet: f64 = w.iter().zip(&particles.logdets).map(|(w, l)| w * l).sum();
    let neg_ent: f64 = w.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum();
    let range = -0.5 * e_logdet - neg_ent - p.ln();

    let e_beta2 = state.mu_beta * state.mu_beta + state.sigma2_beta_q;
    let beta_prior = -0.5 * (LN_2PI + priors.sigma2_beta.ln()) - e_beta2 / (2.0 * priors.sigma2_beta);

    let variance_priors =
        inv_gamma_cross(priors.a1, priors.b1, la1, lb1) + inv_gamma_cross(priors.a2, priors.b2, la2, lb2);

    let perm_priors = state.log_prior_x + state.log_prior_s;

    let entropies = gaussian_entropy(data.n(), state.logdet_sigma_w)
        + gaussian_entropy(1, state.sigma2_beta_q.ln())
        + inv_gamma_entropy(la1, lb1)
        + inv_gamma_entropy(la2, lb2)
        + relaxed_entropy(&state.zeta_x)
        + relaxed_entropy(&state.zeta_s);

    ElboTerms { likelihood, field, range, beta_prior, variance_priors, perm_priors, entropies }
}

pub fn compute_elbo(
    state: &VariationalState,
    data: &Dataset,
    priors: &Priors,
    particles: &PhiParticles,
) -> f64 {
    elbo_terms(state, data, priors, particles).total()
}
