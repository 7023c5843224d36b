//! Importance-sampling factor for the range parameter.
//!
//! Particles are drawn once per fit from the uniform prior on `(0, sqrt 2]`
//! and reused, so the range update reweights a fixed particle set.

use nalgebra::DMatrix;
use rand::Rng;

use super::state::VariationalState;
use super::updates::w_quadratic;
use crate::covkernel::{chol_jittered, exp_correlation, DomainPoints};
use crate::error::{Error, Result};

pub const PHI_UPPER: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
enum Store {
    Cached(Vec<DMatrix<f64>>),
    /// Inverses are rebuilt on demand when caching would exceed the budget.
    OnDemand(DomainPoints),
}

#[derive(Debug, Clone)]
pub struct PhiParticles {
    pub phis: Vec<f64>,
    pub logdets: Vec<f64>,
    store: Store,
}

fn inverse_and_logdet(points: &DomainPoints, phi: f64) -> Result<(DMatrix<f64>, f64)> {
    let r = exp_correlation(points, phi)?;
    let c = chol_jittered(&r.entries)?;
    Ok((c.inverse(), c.log_det()))
}

impl PhiParticles {
    pub fn draw<R: Rng + ?Sized>(
        points: &DomainPoints,
        count: usize,
        cache_bytes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("phi_is_samples must be at least 1".into()));
        }
        // 1 - u lies in (0, 1]
        let phis: Vec<f64> = (0..count).map(|_| PHI_UPPER * (1.0 - rng.random::<f64>())).collect();
        Self::from_phis(points, phis, cache_bytes)
    }

    pub fn from_phis(points: &DomainPoints, phis: Vec<f64>, cache_bytes: usize) -> Result<Self> {
        let n = points.len();
        let need = phis.len().saturating_mul(n * n * 8);
        let mut logdets = Vec::with_capacity(phis.len());
        let store = if need <= cache_bytes {
            let mut inv = Vec::with_capacity(phis.len());
            for &p in &phis {
                let (m, ld) = inverse_and_logdet(points, p)?;
                inv.push(m);
                logdets.push(ld);
            }
            Store::Cached(inv)
        } else {
            for &p in &phis {
                let r = exp_correlation(points, p)?;
                logdets.push(chol_jittered(&r.entries)?.log_det());
            }
            Store::OnDemand(points.clone())
        };
        Ok(Self { phis, logdets, store })
    }

    pub fn len(&self) -> usize {
        self.phis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phis.is_empty()
    }

    pub fn is_cached(&self) -> bool {
        matches!(self.store, Store::Cached(_))
    }

    fn for_each_inverse(&self, mut f: impl FnMut(usize, &DMatrix<f64>)) -> Result<()> {
        match &self.store {
            Store::Cached(v) => v.iter().enumerate().for_each(|(j, m)| f(j, m)),
            Store::OnDemand(points) => {
                for (j, &p) in self.phis.iter().enumerate() {
                    let (m, _) = inverse_and_logdet(points, p)?;
                    f(j, &m);
                }
            }
        }
        Ok(())
    }

    /// Uniform weights and their average inverse, for initialization.
    pub fn uniform_average(&self) -> Result<DMatrix<f64>> {
        let w = vec![1.0 / self.len() as f64; self.len()];
        self.weighted_inverse(&w)
    }

    pub fn weighted_inverse(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        self.for_each_inverse(|j, m| match acc.as_mut() {
            Some(a) => *a += m * w[j],
            None => acc = Some(m * w[j]),
        })?;
        Ok(acc.expect("at least one particle"))
    }

    /// `log c_j = -1/2 log|R_j| - psig/2 [tr(R_j^{-1} Sigma_W) + mu^T R_j^{-1} mu]`.
    pub fn log_weights(&self, state: &VariationalState) -> Result<Vec<f64>> {
        let psig = state.precision_sigma();
        let mut out = vec![0.0; self.len()];
        self.for_each_inverse(|j, m| {
            let q = w_quadratic(m, &state.mu_w, &state.sigma_w);
            out[j] = -0.5 * self.logdets[j] - 0.5 * psig * q;
        })?;
        Ok(out)
    }

    pub fn mean_phi(&self, w: &[f64]) -> f64 {
        self.phis.iter().zip(w).map(|(p, w)| p * w).sum()
    }
}

/// Normalized weights from log-weights via log-sum-exp.
pub(crate) fn softmax(log_w: &[f64]) -> Result<Vec<f64>> {
    let mx = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::WeightUnderflow(format!("max log-weight {mx}")));
    }
    let e: Vec<f64> = log_w.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::WeightUnderflow(format!("weight sum {s}")));
    }
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Range update: reweight the range particles and refresh `E[R^{-1}]`.
pub fn update_phi(state: &mut VariationalState, particles: &PhiParticles) -> Result<()> {
    let lw = particles.log_weights(state)?;
    let w = softmax(&lw)?;
    state.er_inv = particles.weighted_inverse(&w)?;
    state.phi_weights = w;
    Ok(())
}
