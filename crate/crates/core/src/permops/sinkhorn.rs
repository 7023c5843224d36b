use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Output of Sinkhorn scaling together with its final marginal error.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublyStochastic {
    pub entries: DMatrix<f64>,
    /// Largest absolute deviation of a row or column sum from one.
    pub deviation: f64,
    pub iterations: usize,
}

/// Elementwise `exp(M - max M)`, mapping an unconstrained matrix to a
/// strictly positive one with largest entry 1.
pub fn positivity(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mx = m.max();
    m.map(|x| (x - mx).exp())
}

fn marginal_deviation(m: &DMatrix<f64>) -> f64 {
    let mut dev = 0.0f64;
    for i in 0..m.nrows() {
        dev = dev.max((m.row(i).sum() - 1.0).abs());
    }
    for j in 0..m.ncols() {
        dev = dev.max((m.column(j).sum() - 1.0).abs());
    }
    dev
}

/// Alternating row and column normalization of a nonnegative square matrix.
///
/// Stops when every marginal is within `tol` of one or after `max_iters`
/// full sweeps; the achieved deviation is returned either way.
pub fn sinkhorn_knopp(m: &DMatrix<f64>, max_iters: usize, tol: f64) -> Result<DoublyStochastic> {
    let k = m.nrows();
    if m.ncols() != k {
        return Err(Error::Dimension { expected: k, got: m.ncols() });
    }
    if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::SinkhornInfeasible("entries must be finite and nonnegative".into()));
    }
    for i in 0..k {
        if m.row(i).sum() <= 0.0 {
            return Err(Error::SinkhornInfeasible(format!("row {i} is zero")));
        }
        if m.column(i).sum() <= 0.0 {
            return Err(Error::SinkhornInfeasible(format!("column {i} is zero")));
        }
    }
    let mut s = m.clone();
    let mut dev = marginal_deviation(&s);
    let mut it = 0;
    while dev > tol && it < max_iters {
        for i in 0..k {
            let r = s.row(i).sum();
            s.row_mut(i).scale_mut(1.0 / r);
        }
        for j in 0..k {
            let c = s.column(j).sum();
            s.column_mut(j).scale_mut(1.0 / c);
        }
        it += 1;
        dev = marginal_deviation(&s);
    }
    Ok(DoublyStochastic { entries: s, deviation: dev, iterations: it })
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on logits, recording every half-step so the map
/// `logits -> doubly stochastic` can be differentiated.
///
/// Equivalent to `sinkhorn_knopp(positivity(logits))`.
#[derive(Debug, Clone)]
pub struct SinkhornTape {
    /// `exp` of the logits after each half-step; even entries follow a row
    /// normalization, odd entries a column normalization.
    steps: Vec<DMatrix<f64>>,
}

impl SinkhornTape {
    pub fn forward(logits: &DMatrix<f64>, max_iters: usize, tol: f64) -> Self {
        let k = logits.nrows();
        let mut l = logits.clone();
        let mut steps = Vec::new();
        for _ in 0..max_iters.max(1) {
            for i in 0..k {
                let z = logsumexp(l.row(i).iter().copied());
                for j in 0..k {
                    l[(i, j)] -= z;
                }
            }
            steps.push(l.map(f64::exp));
            for j in 0..k {
                let z = logsumexp(l.column(j).iter().copied());
                for i in 0..k {
                    l[(i, j)] -= z;
                }
            }
            let e = l.map(f64::exp);
            // columns are exact now, rows carry the remaining error
            let dev = (0..k).map(|i| (e.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
            steps.push(e);
            if dev <= tol {
                break;
            }
        }
        Self { steps }
    }

    pub fn output(&self) -> &DMatrix<f64> {
        self.steps.last().expect("tape has at least one sweep")
    }

    pub fn sweeps(&self) -> usize {
        self.steps.len() / 2
    }

    /// Pulls a gradient with respect to the output back to the logits.
    pub fn backward(&self, grad_out: &DMatrix<f64>) -> DMatrix<f64> {
        let k = grad_out.nrows();
        let mut g = grad_out.component_mul(self.output());
        for (idx, s) in self.steps.iter().enumerate().rev() {
            if idx % 2 == 1 {
                for j in 0..k {
                    let c: f64 = g.column(j).sum();
                    for i in 0..k {
                        g[(i, j)] -= s[(i, j)] * c;
                    }
                }
            } else {
                for i in 0..k {
                    let r: f64 = g.row(i).sum();
                    for j in 0..k {
                        g[(i, j)] -= s[(i, j)] * r;
                    }
                }
            }
        }
        g
    }
}
