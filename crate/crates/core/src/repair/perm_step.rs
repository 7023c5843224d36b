//! Stochastic gradient ascent on the permutation factors.
//!
//! With the other factors fixed, the part of the ELBO that depends on one
//! permutation `pi` is, up to a constant,
//! `ptau <pi, L> - ptau/2 <pi Q, pi> + sum log mix(pi_ij)`
//! plus the entropy of the relaxed factor. Gradients go through
//! `tau * Psi` only; the rounded part is held fixed.

use nalgebra::DMatrix;
use rand::Rng;

use super::state::{Priors, VariationalState};
use super::updates::block;
use super::FitConfig;
use crate::error::{Error, Result};
use crate::permops::{relaxed_entropy, PermMoments, RelaxedPermParams, RelaxedSampler};
use crate::simulate::Dataset;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log(0.5 N(x; 0, eta2) + 0.5 N(x; 1, eta2))` and its derivative.
pub fn log_mixture(x: f64, eta2: f64) -> (f64, f64) {
    let a = -0.5 * x * x / eta2;
    let b = -0.5 * (x - 1.0) * (x - 1.0) / eta2;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let val = m + (0.5 * (ea + eb)).ln() - 0.5 * (LN_2PI + eta2.ln());
    let grad = (ea * (-x / eta2) + eb * (-(x - 1.0) / eta2)) / (ea + eb);
    (val, grad)
}

/// Quadratic objective of one permutation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PermObjective {
    pub lin: DMatrix<f64>,
    pub quad: DMatrix<f64>,
    pub ptau: f64,
    pub eta2: f64,
}

impl PermObjective {
    pub fn value(&self, pi: &DMatrix<f64>) -> f64 {
        let data = self.ptau * (pi.component_mul(&self.lin).sum()
            - 0.5 * (pi * &self.quad).component_mul(pi).sum());
        let prior: f64 = pi.iter().map(|&x| log_mixture(x, self.eta2).0).sum();
        data + prior
    }

    pub fn gradient(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = (&self.lin - pi * &self.quad) * self.ptau;
        for (gi, &x) in g.iter_mut().zip(pi.iter()) {
            *gi += log_mixture(x, self.eta2).1;
        }
        g
    }
}

pub fn objective_x(state: &VariationalState, data: &Dataset, priors: &Priors) -> PermObjective {
    let (k, b) = (data.k, data.b);
    let ms = &state.moments_s.mstar;
    let mut lin = DMatrix::zeros(k, k);
    let mut sxx = DMatrix::zeros(k, k);
    for i in 0..b {
        let x = block(&data.x, k, i);
        let y = block(&data.y, k, i);
        let mu = state.mu_w.rows(i * k, k);
        let a = (y - ms * mu) * state.mu_beta;
        lin += &a * x.transpose();
        sxx += x * x.transpose();
    }
    let e_beta2 = state.mu_beta * state.mu_beta + state.sigma2_beta_q;
    PermObjective { lin, quad: sxx * e_beta2, ptau: state.precision_tau(), eta2: priors.eta_x2 }
}

pub fn objective_s(state: &VariationalState, data: &Dataset, priors: &Priors) -> PermObjective {
    let (k, b) = (data.k, data.b);
    let mx = &state.moments_x.mstar;
    let mut lin = DMatrix::zeros(k, k);
    let mut quad = DMatrix::zeros(k, k);
    for i in 0..b {
        let x = block(&data.x, k, i);
        let y = block(&data.y, k, i);
        let mu = state.mu_w.rows(i * k, k);
        let a = y - mx * x * state.mu_beta;
        lin += &a * mu.transpose();
        quad += mu * mu.transpose() + state.sigma_w.view((i * k, i * k), (k, k));
    }
    PermObjective { lin, quad, ptau: state.precision_tau(), eta2: priors.eta_s2 }
}

/// Monte-Carlo objective for fixed noise draws, entropy included.
pub fn mc_objective(obj: &PermObjective, params: &RelaxedPermParams, noises: &[DMatrix<f64>]) -> Result<f64> {
    let sampler = RelaxedSampler::new(params)?;
    let mean = noises.iter().map(|z| obj.value(&sampler.with_noise(z.clone()).matrix)).sum::<f64>()
        / noises.len() as f64;
    Ok(mean + relaxed_entropy(params))
}

/// Straight-through gradient of [`mc_objective`] with respect to `(M, V)`.
pub fn mc_gradient(
    obj: &PermObjective,
    params: &RelaxedPermParams,
    noises: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sampler = RelaxedSampler::new(params)?;
    let k = params.k();
    let tau = params.temperature;
    let mut g_psi = DMatrix::zeros(k, k);
    let mut g_v = DMatrix::zeros(k, k);
    for z in noises {
        let s = sampler.with_noise(z.clone());
        let g = obj.gradient(&s.matrix) * tau;
        g_v += g.component_mul(z);
        g_psi += g;
    }
    let m = noises.len() as f64;
    g_psi /= m;
    g_v /= m;
    g_v += params.v.map(|v| 1.0 / v);
    let g_m = sampler.tape().backward(&g_psi);
    for (idx, (a, b)) in g_m.iter().zip(g_v.iter()).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFiniteGradient { row: idx % k, col: idx / k });
        }
    }
    Ok((g_m, g_v))
}

pub fn temperature(tau0: f64, step: usize, config: &FitConfig) -> f64 {
    (tau0 * config.anneal_rate.powi(step.min(i32::MAX as usize) as i32)).max(config.tau_min)
}

/// Draws the moments `E[pi]`, `E[pi^T pi]` and `E[log p(pi)]`.
pub fn refresh_moments<R: Rng + ?Sized>(
    params: &RelaxedPermParams,
    samples: usize,
    eta2: f64,
    rng: &mut R,
) -> Result<(PermMoments, f64)> {
    let sampler = RelaxedSampler::new(params)?;
    let draws: Vec<_> = (0..samples.max(1)).map(|_| sampler.sample(rng)).collect();
    let lp = draws
        .iter()
        .map(|d| d.matrix.iter().map(|&x| log_mixture(x, eta2).0).sum::<f64>())
        .sum::<f64>()
        / draws.len() as f64;
    Ok((PermMoments::from_samples(&draws), lp))
}

#[derive(Clone, Copy)]
enum Which {
    X,
    S,
}

fn ascend<R: Rng + ?Sized>(
    which: Which,
    state: &mut VariationalState,
    data: &Dataset,
    priors: &Priors,
    config: &FitConfig,
    rng: &mut R,
) -> Result<()> {
    let obj = match which {
        Which::X => objective_x(state, data, priors),
        Which::S => objective_s(state, data, priors),
    };
    let (tau0, lr, eta2) = match which {
        Which::X => (config.tau0_x, config.lr_x, priors.eta_x2),
        Which::S => (config.tau0_s, config.lr_s, priors.eta_s2),
    };
    let scale = lr / data.n() as f64;
    let mut params = match which {
        Which::X => state.zeta_x.clone(),
        Which::S => state.zeta_s.clone(),
    };
    for _ in 0..config.perm_inner_steps {
        params.temperature = temperature(tau0, state.global_step, config);
        let sampler = RelaxedSampler::new(&params)?;
        let noises: Vec<_> = (0..config.mc_samples).map(|_| sampler.draw_noise(rng)).collect();
        let (gm, gv) = mc_gradient(&obj, &params, &noises)?;
        params.m += gm * scale;
        params.v += gv * scale;
        params.v.apply(|v| *v = v.clamp(config.v_min, config.v_max));
        state.global_step += 1;
    }
    params.temperature = temperature(tau0, state.global_step, config);
    let (mo, lp) = refresh_moments(&params, config.mc_samples, eta2, rng)?;
    match which {
        Which::X => {
            state.zeta_x = params;
            state.moments_x = mo;
            state.log_prior_x = lp;
        }
        Which::S => {
            state.zeta_s = params;
            state.moments_s = mo;
            state.log_prior_s = lp;
        }
    }
    Ok(())
}

/// Permutation update: inner ascent on `pi_X`, then on `pi_S`, sharing one annealing
/// counter, followed by fresh Monte-Carlo moments.
pub fn update_permutations<R: Rng + ?Sized>(
    state: &mut VariationalState,
    data: &Dataset,
    priors: &Priors,
    config: &FitConfig,
    rng: &mut R,
) -> Result<()> {
    ascend(Which::X, state, data, priors, config, rng)?;
    ascend(Which::S, state, data, priors, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_density_matches_direct_formula() {
        for &x in &[-0.5, 0.0, 0.3, 1.0, 1.7] {
            let eta2: f64 = 0.1;
            let n = |m: f64| (-(x - m) * (x - m) / (2.0 * eta2)).exp() / (2.0 * std::f64::consts::PI * eta2).sqrt();
            let want = (0.5 * n(0.0) + 0.5 * n(1.0)).ln();
            let (v, g) = log_mixture(x, eta2);
            assert!((v - want).abs() < 1e-12);
            let h = 1e-6;
            let fd = (log_mixture(x + h, eta2).0 - log_mixture(x - h, eta2).0) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6);
        }
    }

    #[test]
    fn temperature_schedule() {
        let c = FitConfig::default();
        assert_eq!(temperature(1.0, 0, &c), 1.0);
        assert!((temperature(1.0, 10, &c) - 0.995f64.powi(10)).abs() < 1e-15);
        assert_eq!(temperature(1.0, 100_000, &c), 0.05);
        let mut prev = 1.0;
        for s in 0..2000 {
            let t = temperature(1.0, s, &c);
            assert!(t <= prev && t >= 0.05);
            prev = t;
        }
    }
}
