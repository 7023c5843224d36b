use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::hungarian::hungarian_round;
use super::sinkhorn::SinkhornTape;
use super::Permutation;
use crate::error::{Error, Result};

// The relaxed path runs Sinkhorn much tighter than the public defaults so
// that the sampled matrices are smooth functions of M.
pub(crate) const RELAXED_SINKHORN_ITERS: usize = 2000;
pub(crate) const RELAXED_SINKHORN_TOL: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mean matrix, elementwise noise scale and temperature of one relaxed
/// permutation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPermParams {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub temperature: f64,
}

impl RelaxedPermParams {
    pub fn new(m: DMatrix<f64>, v: DMatrix<f64>, temperature: f64) -> Result<Self> {
        let p = Self { m, v, temperature };
        p.validate()?;
        Ok(p)
    }

    /// Identity-centred start with constant scale.
    pub fn identity(k: usize, v0: f64, temperature: f64) -> Self {
        Self {
            m: DMatrix::identity(k, k),
            v: DMatrix::from_element(k, k, v0),
            temperature,
        }
    }

    pub fn k(&self) -> usize {
        self.m.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.m.nrows();
        if self.m.ncols() != k || self.v.shape() != (k, k) {
            return Err(Error::Dimension { expected: k, got: self.v.nrows() });
        }
        if self.v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Input("relaxed scale entries must be positive".into()));
        }
        if self.m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("relaxed mean entries must be finite".into()));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Input(format!("temperature {} not in (0, 1]", self.temperature)));
        }
        Ok(())
    }
}

/// A draw `tau * Psi + (1 - tau) * round(Psi)` with the noise that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPermutation {
    pub matrix: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub rounded: Permutation,
}

/// Sampler that caches the Sinkhorn projection of `M` for repeated draws.
#[derive(Debug, Clone)]
pub struct RelaxedSampler {
    params: RelaxedPermParams,
    tape: SinkhornTape,
}

impl RelaxedSampler {
    pub fn new(params: &RelaxedPermParams) -> Result<Self> {
        params.validate()?;
        let tape = SinkhornTape::forward(&params.m, RELAXED_SINKHORN_ITERS, RELAXED_SINKHORN_TOL);
        if tape.output().iter().any(|x| !x.is_finite()) {
            return Err(Error::SinkhornInfeasible("non-finite projection".into()));
        }
        Ok(Self { params: params.clone(), tape })
    }

    pub fn params(&self) -> &RelaxedPermParams {
        &self.params
    }

    /// Sinkhorn projection of the positivity-transformed mean.
    pub fn projected_mean(&self) -> &DMatrix<f64> {
        self.tape.output()
    }

    pub fn tape(&self) -> &SinkhornTape {
        &self.tape
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let k = self.params.k();
        DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    pub fn with_noise(&self, z: DMatrix<f64>) -> RelaxedPermutation {
        let tau = self.params.temperature;
        let psi = self.projected_mean() + self.params.v.component_mul(&z);
        let rounded = hungarian_round(&psi);
        let matrix = psi * tau + rounded.to_matrix() * (1.0 - tau);
        RelaxedPermutation { matrix, noise: z, rounded }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RelaxedPermutation {
        let z = self.draw_noise(rng);
        self.with_noise(z)
    }
}

pub fn sample_relaxed<R: Rng + ?Sized>(
    params: &RelaxedPermParams,
    rng: &mut R,
) -> Result<RelaxedPermutation> {
    Ok(RelaxedSampler::new(params)?.sample(rng))
}

/// Log-density of a self-generated draw, via its retained noise.
pub fn relaxed_log_density(pi_star: &RelaxedPermutation, params: &RelaxedPermParams) -> f64 {
    let tau = params.temperature;
    pi_star
        .noise
        .iter()
        .zip(params.v.iter())
        .map(|(&z, &v)| -(tau * v).ln() - 0.5 * z * z - 0.5 * LN_2PI)
        .sum()
}

/// Differential entropy of the relaxed family at fixed rounding.
pub fn relaxed_entropy(params: &RelaxedPermParams) -> f64 {
    let k2 = (params.k() * params.k()) as f64;
    let h: f64 = params.v.iter().map(|&v| 0.5 * (LN_2PI + 1.0) + v.ln()).sum();
    k2 * params.temperature.ln() + h
}

/// Monte-Carlo first and second moments `E[pi]` and `E[pi^T pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermMoments {
    pub mstar: DMatrix<f64>,
    pub vstar: DMatrix<f64>,
}

impl PermMoments {
    /// Moments of a point mass at `p`.
    pub fn degenerate(p: &DMatrix<f64>) -> Self {
        Self { mstar: p.clone(), vstar: p.transpose() * p }
    }

    pub fn from_samples(samples: &[RelaxedPermutation]) -> Self {
        assert!(!samples.is_empty(), "need at least one sample");
        let k = samples[0].matrix.nrows();
        let mut m = DMatrix::zeros(k, k);
        let mut v = DMatrix::zeros(k, k);
        for s in samples {
            m += &s.matrix;
            v += s.matrix.tr_mul(&s.matrix);
        }
        let n = samples.len() as f64;
        m /= n;
        v /= n;
        crate::covkernel::symmetrize(&mut v);
        Self { mstar: m, vstar: v }
    }
}

pub fn perm_moments<R: Rng + ?Sized>(
    params: &RelaxedPermParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<PermMoments> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let sampler = RelaxedSampler::new(params)?;
    let draws: Vec<_> = (0..n_samples).map(|_| sampler.sample(rng)).collect();
    Ok(PermMoments::from_samples(&draws))
}
