//! Exponential covariance construction and dense Cholesky helpers.
//!
//! The correlation kernel is `R_ij = exp(-d_ij / phi)`: `phi` is a range
//! parameter and sits in the denominator. Other code in the crate (priors,
//! baselines, simulation) relies on this parameterization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Observation locations in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPoints {
    pub coords: Vec<[f64; 2]>,
}

impl DomainPoints {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let a = self.coords[i];
        let b = self.coords[j];
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    /// Reorders points so that entry `i` of the result is entry `idx[i]` of `self`.
    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            coords: idx.iter().map(|&j| self.coords[j]).collect(),
        }
    }
}

/// Partial sill, range and nugget of the exponential covariance model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceParams {
    pub sigma2: f64,
    pub phi: f64,
    pub tau2: f64,
}

impl CovarianceParams {
    pub fn new(sigma2: f64, phi: f64, tau2: f64) -> Result<Self> {
        let p = Self { sigma2, phi, tau2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.sigma2) && ok(self.phi) && ok(self.tau2) {
            Ok(())
        } else {
            Err(Error::Input(format!("covariance parameters must be positive: {self:?}")))
        }
    }
}

/// Dense correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub entries: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn exp_correlation(points: &DomainPoints, phi: f64) -> Result<CorrelationMatrix> {
    if points.is_empty() {
        return Err(Error::Input("no domain points".into()));
    }
    if !(phi.is_finite() && phi > 0.0) {
        return Err(Error::Input(format!("range must be positive, got {phi}")));
    }
    if points.coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::Input("non-finite coordinate".into()));
    }
    let n = points.len();
    let mut r = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = (-points.dist(i, j) / phi).exp();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(CorrelationMatrix { entries: r })
}

/// `sigma2 * R + tau2 * I`. Only the sill and nugget of `params` are used.
pub fn build_sigma(r: &CorrelationMatrix, params: &CovarianceParams) -> DMatrix<f64> {
    sigma_from_parts(&r.entries, params.sigma2, params.tau2)
}

pub(crate) fn sigma_from_parts(r: &DMatrix<f64>, sigma2: f64, tau2: f64) -> DMatrix<f64> {
    let mut s = r * sigma2;
    for i in 0..s.nrows() {
        s[(i, i)] += tau2;
    }
    s
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

impl CholFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        self.forward_from(b, 0);
    }

    // forward substitution assuming b[..start] == 0
    fn forward_from(&self, b: &mut [f64], start: usize) {
        let n = self.dim();
        let data = self.l.as_slice();
        for k in start..n {
            let col = &data[k * n..(k + 1) * n];
            let bk = b[k] / col[k];
            b[k] = bk;
            if bk != 0.0 {
                for (x, y) in b[k + 1..].iter_mut().zip(&col[k + 1..]) {
                    *x -= y * bk;
                }
            }
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let data = self.l.as_slice();
        for i in (0..n).rev() {
            let col = &data[i * n..(i + 1) * n];
            let dot: f64 = col[i + 1..].iter().zip(&b[i + 1..]).map(|(x, y)| x * y).sum();
            b[i] = (b[i] - dot) / col[i];
        }
    }

    /// `L⁻¹ b`, the whitening map.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.forward_in_place(out.as_mut_slice());
        out
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.forward_in_place(out.as_mut_slice());
        self.backward_in_place(out.as_mut_slice());
        out
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let s = col.as_mut_slice();
            self.forward_in_place(s);
            self.backward_in_place(s);
        }
        out
    }

    /// Inverse of the lower factor.
    pub fn l_inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for (j, mut col) in inv.column_iter_mut().enumerate() {
            self.forward_from(col.as_mut_slice(), j);
        }
        inv
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = self.l_inverse();
        let mut inv = li.tr_mul(&li);
        symmetrize(&mut inv);
        inv
    }
}

/// Plain Cholesky without jitter. Fails with the index of the first
/// non-positive pivot.
pub fn chol_factor(a: &DMatrix<f64>) -> Result<CholFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension { expected: n, got: a.ncols() });
    }
    let mut l = a.lower_triangle();
    let data = l.as_mut_slice();
    // column-major storage: column j occupies data[j*n..(j+1)*n]
    for j in 0..n {
        let (done, rest) = data.split_at_mut(j * n);
        let col = &mut rest[..n];
        for k in 0..j {
            let ck = &done[k * n..(k + 1) * n];
            let ljk = ck[j];
            if ljk != 0.0 {
                for (x, y) in col[j..].iter_mut().zip(&ck[j..]) {
                    *x -= y * ljk;
                }
            }
        }
        let d = col[j];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        col[j] = d;
        for x in &mut col[j + 1..] {
            *x /= d;
        }
    }
    Ok(CholFactor { l })
}

/// Cholesky with a single jitter retry of `1e-10 * trace / n` on the diagonal.
pub fn chol_jittered(a: &DMatrix<f64>) -> Result<CholFactor> {
    match chol_factor(a) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.nrows();
            let jitter = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
            let mut b = a.clone();
            for i in 0..n {
                b[(i, i)] += jitter;
            }
            chol_factor(&b)
        }
        Err(e) => Err(e),
    }
}

pub fn chol_solve(factor: &CholFactor, rhs: &DVector<f64>) -> DVector<f64> {
    factor.solve_vec(rhs)
}

pub fn log_det(factor: &CholFactor) -> f64 {
    factor.log_det()
}

pub fn snr(beta: f64, sigma: &DMatrix<f64>) -> Result<f64> {
    let eig = SymmetricEigen::new(sigma.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmin > 0.0) {
        return Err(Error::Singular);
    }
    Ok(beta * beta / (lmax * (lmax / lmin)))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
