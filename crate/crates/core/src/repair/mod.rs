//! Variational Bayes fit of the block-permuted model.
//!
//! One outer iteration runs, in order: the `beta` factor, the `W` factor,
//! the two Inverse-Gamma factors, the range particles, and finally the
//! stochastic ascent on the two permutation factors.

mod elbo;
mod perm_step;
mod phi;
mod state;
mod updates;

pub use elbo::{compute_elbo, elbo_terms, gaussian_entropy, inv_gamma_entropy, ElboTerms};
pub use perm_step::{
    log_mixture, mc_gradient, mc_objective, objective_s, objective_x, refresh_moments, temperature,
    update_permutations, PermObjective,
};
pub use phi::{update_phi, PhiParticles, PHI_UPPER};
pub use state::{Priors, VariationalState};
pub use updates::{
    expected_residual, update_beta, update_sigma2, update_tau2, update_w, ExpectedResidual,
};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::permops::{hungarian_round, positivity, sinkhorn_knopp, Permutation, RelaxedPermParams};
use crate::record::Record;
use crate::simulate::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub elbo_tol: f64,
    pub max_outer_iters: usize,
    /// Outer iterations always run before the stopping rule applies.
    pub min_outer_iters: usize,
    pub lr_x: f64,
    pub lr_s: f64,
    pub perm_inner_steps: usize,
    pub mc_samples: usize,
    pub phi_is_samples: usize,
    pub tau0_x: f64,
    pub tau0_s: f64,
    pub tau_min: f64,
    pub anneal_rate: f64,
    /// Bounds applied to the relaxed scales after every step. Without an
    /// upper bound the entropy term inflates `V` whenever the data term is weak.
    pub v_min: f64,
    pub v_max: f64,
    pub v_init: f64,
    /// Skip the permutation step (the permutation factors stay at their
    /// initial values).
    pub freeze_permutations: bool,
    /// Memory allowed for caching `R(phi_j)^{-1}` across particles.
    pub phi_cache_bytes: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            elbo_tol: 1e-2,
            max_outer_iters: 200,
            min_outer_iters: 5,
            lr_x: 10.0,
            lr_s: 10.0,
            perm_inner_steps: 25,
            mc_samples: 64,
            phi_is_samples: 64,
            tau0_x: 1.0,
            tau0_s: 1.0,
            tau_min: 0.05,
            anneal_rate: 0.995,
            v_min: 1e-4,
            v_max: 0.3,
            v_init: 0.1,
            freeze_permutations: false,
            phi_cache_bytes: 1 << 30,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.tau_min > 0.0 && self.tau_min < 1.0) {
            return bad("tau_min must lie in (0, 1)");
        }
        if !(self.anneal_rate > 0.0 && self.anneal_rate < 1.0) {
            return bad("anneal_rate must lie in (0, 1)");
        }
        for t in [self.tau0_x, self.tau0_s] {
            if !(t > 0.0 && t <= 1.0) {
                return bad("initial temperatures must lie in (0, 1]");
            }
        }
        if self.max_outer_iters == 0 || self.perm_inner_steps == 0 || self.mc_samples == 0 || self.phi_is_samples == 0 {
            return bad("iteration and sample counts must be at least 1");
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_init && self.v_init <= self.v_max) {
            return bad("need 0 < v_min <= v_init <= v_max");
        }
        if !(self.lr_x >= 0.0 && self.lr_s >= 0.0 && self.elbo_tol.is_finite()) {
            return bad("learning rates must be nonnegative and elbo_tol finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub beta_mean: f64,
    pub beta_var: f64,
    pub pi_x_hat: Permutation,
    pub pi_s_hat: Permutation,
    pub sigma2_hat: f64,
    pub tau2_hat: f64,
    pub phi_hat: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Posterior mean of the latent field at the stored coordinates.
    pub mu_w: Vec<f64>,
}

impl FitReport {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        r.push("method", "repair");
        r.push_f64("beta_mean", self.beta_mean);
        r.push_f64("beta_var", self.beta_var);
        r.push("pi_x_hat", self.pi_x_hat.to_string());
        r.push("pi_s_hat", self.pi_s_hat.to_string());
        r.push_f64("sigma2_hat", self.sigma2_hat);
        r.push_f64("tau2_hat", self.tau2_hat);
        r.push_f64("phi_hat", self.phi_hat);
        r.push("iterations", self.iterations.to_string());
        r.push("converged", self.converged.to_string());
        r
    }

    pub fn write_elbo_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "elbo"])?;
        for (i, e) in self.elbo_trace.iter().enumerate() {
            wr.write_record([(i + 1).to_string(), e.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Projects the first moments onto the Birkhoff polytope and rounds them.
pub fn extract_permutations(state: &VariationalState) -> Result<(Permutation, Permutation)> {
    let round = |m: &DMatrix<f64>| -> Result<Permutation> {
        let ds = sinkhorn_knopp(&positivity(m), 200, 1e-6)?;
        Ok(hungarian_round(&ds.entries))
    };
    Ok((round(&state.moments_x.mstar)?, round(&state.moments_s.mstar)?))
}

/// A fit in progress: state, range particles and the generator driving
/// the Monte-Carlo steps.
#[derive(Debug, Clone)]
pub struct FitSession<'a> {
    pub data: &'a Dataset,
    pub priors: Priors,
    pub config: FitConfig,
    pub state: VariationalState,
    pub particles: PhiParticles,
    rng: ChaCha8Rng,
}

impl<'a> FitSession<'a> {
    pub fn new(data: &'a Dataset, priors: &Priors, config: &FitConfig) -> Result<Self> {
        data.validate()?;
        priors.validate()?;
        config.validate()?;
        let (k, n) = (data.k, data.n());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let particles = PhiParticles::draw(&data.points, config.phi_is_samples, config.phi_cache_bytes, &mut rng)?;
        let zeta_x = RelaxedPermParams::identity(k, config.v_init, config.tau0_x);
        let zeta_s = RelaxedPermParams::identity(k, config.v_init, config.tau0_s);
        let (moments_x, log_prior_x) = refresh_moments(&zeta_x, config.mc_samples, priors.eta_x2, &mut rng)?;
        let (moments_s, log_prior_s) = refresh_moments(&zeta_s, config.mc_samples, priors.eta_s2, &mut rng)?;
        let p = particles.len();
        let mut state = VariationalState {
            mu_beta: 0.0,
            sigma2_beta_q: priors.sigma2_beta,
            mu_w: DVector::zeros(n),
            sigma_w: DMatrix::identity(n, n),
            logdet_sigma_w: 0.0,
            la1: priors.a1,
            lb1: priors.b1,
            la2: priors.a2,
            lb2: priors.b2,
            er_inv: particles.uniform_average()?,
            phi_weights: vec![1.0 / p as f64; p],
            zeta_x,
            zeta_s,
            moments_x,
            moments_s,
            log_prior_x,
            log_prior_s,
            global_step: 0,
        };
        update_phi(&mut state, &particles)?;
        Ok(Self { data, priors: *priors, config: config.clone(), state, particles, rng })
    }

    /// The closed-form updates of one outer iteration, in order.
    pub fn closed_form_steps(&mut self) -> Result<()> {
        update_beta(&mut self.state, self.data, &self.priors)?;
        update_w(&mut self.state, self.data, &self.priors)?;
        update_sigma2(&mut self.state, self.data, &self.priors);
        update_tau2(&mut self.state, self.data, &self.priors)?;
        update_phi(&mut self.state, &self.particles)
    }

    pub fn permutation_step(&mut self) -> Result<()> {
        update_permutations(&mut self.state, self.data, &self.priors, &self.config, &mut self.rng)
    }

    pub fn elbo(&self) -> f64 {
        compute_elbo(&self.state, self.data, &self.priors, &self.particles)
    }

    fn annealed(&self) -> bool {
        let c = &self.config;
        c.freeze_permutations
            || (temperature(c.tau0_x, self.state.global_step, c) <= c.tau_min
                && temperature(c.tau0_s, self.state.global_step, c) <= c.tau_min)
    }

    pub fn run(mut self) -> Result<FitReport> {
        let mut trace: Vec<f64> = Vec::new();
        let mut converged = false;
        for it in 1..=self.config.max_outer_iters {
            self.closed_form_steps()?;
            if !self.config.freeze_permutations {
                self.permutation_step()?;
            }
            let e = self.elbo();
            if !e.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let prev = trace.last().copied();
            trace.push(e);
            if let Some(p) = prev {
                if it >= self.config.min_outer_iters && self.annealed() && e - p <= self.config.elbo_tol {
                    converged = true;
                    break;
                }
            }
        }
        self.report(trace, converged)
    }

    pub fn report(&self, elbo_trace: Vec<f64>, converged: bool) -> Result<FitReport> {
        let (pi_x_hat, pi_s_hat) = extract_permutations(&self.state)?;
        let s = &self.state;
        Ok(FitReport {
            beta_mean: s.mu_beta,
            beta_var: s.sigma2_beta_q,
            pi_x_hat,
            pi_s_hat,
            sigma2_hat: s.sigma2_mean(),
            tau2_hat: s.tau2_mean(),
            phi_hat: self.particles.mean_phi(&s.phi_weights),
            iterations: elbo_trace.len(),
            elbo_trace,
            converged,
            mu_w: s.mu_w.as_slice().to_vec(),
        })
    }
}

pub fn fit(data: &Dataset, priors: &Priors, config: &FitConfig) -> Result<FitReport> {
    FitSession::new(data, priors, config)?.run()
}

#[cfg(test)]
mod tests;
