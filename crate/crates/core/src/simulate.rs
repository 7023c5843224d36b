//! Synthetic data from the block-permuted model and the dataset container.
//!
//! Observed quantities are stored in observed order. With truth `(pi_x, pi_s)`
//! the outcome of block `b` satisfies
//! `Y_b = beta * pi_x X_b + pi_s W_b + eps_b`, where `W` is the latent field
//! at the stored coordinates.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covkernel::{chol_jittered, exp_correlation, CholFactor, CovarianceParams, DomainPoints};
use crate::error::{Error, Result};
use crate::permops::{apply_blocks, random_perm_with_hamming, Permutation};

/// How the within-block permutation of one factor is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum PermSpec {
    /// Fresh permutation with exactly this Hamming distance from identity.
    Hamming(usize),
    /// Hamming distance drawn uniformly from `{2, ..., K}` (identity when K = 1).
    RandomHamming,
    /// Same permutation for every replicate.
    Fixed(Permutation),
}

impl PermSpec {
    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Permutation> {
        match self {
            PermSpec::Hamming(h) => random_perm_with_hamming(k, *h, rng),
            PermSpec::RandomHamming => {
                if k < 2 {
                    return Ok(Permutation::identity(k));
                }
                let h = rng.random_range(2..=k);
                random_perm_with_hamming(k, h, rng)
            }
            PermSpec::Fixed(p) => {
                if p.len() != k {
                    return Err(Error::Dimension { expected: k, got: p.len() });
                }
                Ok(p.clone())
            }
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        match self {
            PermSpec::Hamming(h) if *h == 1 || *h > k => {
                Err(Error::InfeasibleHamming { k, target: *h })
            }
            PermSpec::Fixed(p) if p.len() != k => Err(Error::Dimension { expected: k, got: p.len() }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub k: usize,
    pub b: usize,
    pub beta: f64,
    pub cov: CovarianceParams,
    pub perm_x: PermSpec,
    pub perm_s: PermSpec,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        grid_side(self.b)?;
        self.validate_model()
    }

    /// Checks everything except the square-grid requirement on `b`.
    pub fn validate_model(&self) -> Result<()> {
        if self.k == 0 || self.b == 0 {
            return Err(Error::Config("K and B must be at least 1".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        self.cov.validate()?;
        self.perm_x.validate(self.k)?;
        self.perm_s.validate(self.k)
    }
}

/// Ground truth carried by simulated or deliberately shuffled data.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: f64,
    pub pi_x: Permutation,
    pub pi_s: Permutation,
    /// Latent field at the stored coordinates (empty when unknown).
    pub w: Vec<f64>,
    pub cov: Option<CovarianceParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: DomainPoints,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub k: usize,
    pub b: usize,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(points: DomainPoints, x: Vec<f64>, y: Vec<f64>, k: usize, b: usize) -> Result<Self> {
        let d = Self { points, x, y, k, b, truth: None };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.k * self.b
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.k == 0 || self.b == 0 {
            return Err(Error::Input("empty block layout".into()));
        }
        for len in [self.points.len(), self.x.len(), self.y.len()] {
            if len != n {
                return Err(Error::Dimension { expected: n, got: len });
            }
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite exposure or outcome".into()));
        }
        Ok(())
    }

    pub fn block_range(&self, blk: usize) -> std::ops::Range<usize> {
        blk * self.k..(blk + 1) * self.k
    }

    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    pub fn y_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    /// Drops ground truth, leaving only what a fitting method may see.
    pub fn without_truth(&self) -> Self {
        Self { truth: None, ..self.clone() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x1", "x2", "X", "Y", "block_id"])?;
        for i in 0..self.n() {
            let c = self.points.coords[i];
            wr.write_record([
                c[0].to_string(),
                c[1].to_string(),
                self.x[i].to_string(),
                self.y[i].to_string(),
                (i / self.k).to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a CSV with columns `x1,x2,X,Y,block_id`. Blocks must be
    /// contiguous and of equal size.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column {name}") })
        };
        let (i1, i2, ix, iy, ib) = (col("x1")?, col("x2")?, col("X")?, col("Y")?, col("block_id")?);
        let mut coords = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut blocks = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            let num = |i: usize| -> Result<f64> {
                let s = rec.get(i).unwrap_or("").trim();
                s.parse::<f64>()
                    .map_err(|_| Error::Parse { line, msg: format!("bad number {s:?}") })
            };
            coords.push([num(i1)?, num(i2)?]);
            x.push(num(ix)?);
            y.push(num(iy)?);
            let b = rec.get(ib).unwrap_or("").trim();
            blocks.push(
                b.parse::<usize>()
                    .map_err(|_| Error::Parse { line, msg: format!("bad block id {b:?}") })?,
            );
        }
        if blocks.is_empty() {
            return Err(Error::Input("no data rows".into()));
        }
        let k = blocks.iter().take_while(|&&b| b == blocks[0]).count();
        let nb = blocks.len() / k;
        if nb * k != blocks.len() {
            return Err(Error::Input("blocks have unequal sizes".into()));
        }
        for (i, &b) in blocks.iter().enumerate() {
            if b != blocks[(i / k) * k] || (i % k == 0 && i > 0 && b == blocks[i - 1]) {
                return Err(Error::Input(format!("block ids are not contiguous near row {i}")));
            }
        }
        Dataset::new(DomainPoints::new(coords)?, x, y, k, nb)
    }
}

fn grid_side(b: usize) -> Result<usize> {
    let g = (b as f64).sqrt().round() as usize;
    if b == 0 || g * g != b {
        return Err(Error::Config(format!("block count {b} is not a positive perfect square")));
    }
    Ok(g)
}

/// `K` uniform points in each cell of a `sqrt(B) x sqrt(B)` grid of unit
/// cells. Cells are ordered row-major: block `r * g + c` covers
/// `[c, c+1) x [r, r+1)`.
pub fn generate_domain<R: Rng + ?Sized>(b: usize, k: usize, rng: &mut R) -> Result<DomainPoints> {
    let g = grid_side(b)?;
    generate_domain_grid(b, k, g, rng)
}

/// Like [`generate_domain`] for any `b`, filling a grid with `cols` columns
/// row by row; the last row may be partial.
pub fn generate_domain_grid<R: Rng + ?Sized>(
    b: usize,
    k: usize,
    cols: usize,
    rng: &mut R,
) -> Result<DomainPoints> {
    if cols == 0 {
        return Err(Error::Config("grid needs at least one column".into()));
    }
    let mut coords = Vec::with_capacity(b * k);
    for blk in 0..b {
        let (r, c) = (blk / cols, blk % cols);
        for _ in 0..k {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            coords.push([c as f64 + u, r as f64 + v]);
        }
    }
    DomainPoints::new(coords)
}

/// Column count of the near-square grid used for arbitrary block counts.
pub fn grid_columns(b: usize) -> usize {
    ((b as f64).sqrt().ceil() as usize).max(1)
}

pub fn simulate(config: &SimConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with_rng(config, &mut rng)
}

pub fn simulate_with_rng<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<Dataset> {
    config.validate()?;
    let points = generate_domain(config.b, config.k, rng)?;
    let r = exp_correlation(&points, config.cov.phi)?;
    let chol = chol_jittered(&(r.entries * config.cov.sigma2))?;
    simulate_on(config, &points, &chol, rng)
}

/// Draws exposures, field, noise and permutations on a given domain.
/// `chol` must factor `sigma2 * R(phi)` at `points`.
pub fn simulate_on<R: Rng + ?Sized>(
    config: &SimConfig,
    points: &DomainPoints,
    chol: &CholFactor,
    rng: &mut R,
) -> Result<Dataset> {
    config.validate_model()?;
    let (k, b) = (config.k, config.b);
    let n = k * b;
    if points.len() != n || chol.dim() != n {
        return Err(Error::Dimension { expected: n, got: points.len().min(chol.dim()) });
    }
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = chol.l() * z;
    let tau = config.cov.tau2.sqrt();
    let eps: Vec<f64> = (0..n).map(|_| tau * rng.sample::<f64, _>(StandardNormal)).collect();

    let pi_x = config.perm_x.draw(k, rng)?;
    let pi_s = config.perm_s.draw(k, rng)?;
    let px = apply_blocks(&pi_x, &x);
    let ps = apply_blocks(&pi_s, w.as_slice());
    let y: Vec<f64> = (0..n).map(|i| config.beta * px[i] + ps[i] + eps[i]).collect();

    let mut data = Dataset::new(points.clone(), x, y, k, b)?;
    data.truth = Some(Truth {
        beta: config.beta,
        pi_x,
        pi_s,
        w: w.as_slice().to_vec(),
        cov: Some(config.cov),
    });
    Ok(data)
}

/// Scrambles exposures and coordinates within blocks so that the returned
/// data are explained by truth `(pi_x, pi_s)` composed with any truth already
/// present. Outcomes are untouched.
pub fn shuffle_within_blocks(data: &Dataset, pi_x: &Permutation, pi_s: &Permutation) -> Result<Dataset> {
    let k = data.k;
    for p in [pi_x, pi_s] {
        if p.len() != k {
            return Err(Error::Dimension { expected: k, got: p.len() });
        }
    }
    let inv_x = pi_x.inverse();
    let inv_s = pi_s.inverse();
    let x = apply_blocks(&inv_x, &data.x);
    let idx: Vec<usize> = apply_blocks(&inv_s, &(0..data.n()).collect::<Vec<_>>());
    let points = data.points.gather(&idx);
    let truth = match &data.truth {
        Some(t) => Truth {
            beta: t.beta,
            pi_x: t.pi_x.compose(pi_x),
            pi_s: t.pi_s.compose(pi_s),
            w: if t.w.is_empty() { Vec::new() } else { apply_blocks(&inv_s, &t.w) },
            cov: t.cov,
        },
        None => Truth {
            beta: f64::NAN,
            pi_x: pi_x.clone(),
            pi_s: pi_s.clone(),
            w: Vec::new(),
            cov: None,
        },
    };
    Ok(Dataset { points, x, y: data.y.clone(), k, b: data.b, truth: Some(truth) })
}

/// Undoes both permutations using the stored truth. Outcomes keep their
/// order; exposures, coordinates and the field are re-indexed to match, so
/// that `Y = beta X + W + eps` holds row by row. Shuffling data then
/// unshuffling returns the original rows exactly.
pub fn unshuffle_with_truth(data: &Dataset) -> Result<Dataset> {
    let t = data
        .truth
        .as_ref()
        .ok_or_else(|| Error::Input("dataset carries no truth".into()))?;
    let x = apply_blocks(&t.pi_x, &data.x);
    let idx: Vec<usize> = apply_blocks(&t.pi_s, &(0..data.n()).collect::<Vec<_>>());
    let points = data.points.gather(&idx);
    let k = data.k;
    Ok(Dataset {
        points,
        x,
        y: data.y.clone(),
        k,
        b: data.b,
        truth: Some(Truth {
            beta: t.beta,
            pi_x: Permutation::identity(k),
            pi_s: Permutation::identity(k),
            w: if t.w.is_empty() { Vec::new() } else { apply_blocks(&t.pi_s, &t.w) },
            cov: t.cov,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::build_sigma;
    use crate::permops::hamming;

    fn cfg(k: usize, b: usize, beta: f64, cov: CovarianceParams, seed: u64) -> SimConfig {
        SimConfig {
            k,
            b,
            beta,
            cov,
            perm_x: PermSpec::Hamming(0),
            perm_s: PermSpec::Hamming(0),
            seed,
        }
    }

    #[test]
    fn domain_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = generate_domain(1, 3, &mut rng).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.coords.iter().all(|c| (0.0..1.0).contains(&c[0]) && (0.0..1.0).contains(&c[1])));
        let p = generate_domain(4, 2, &mut rng).unwrap();
        let cells = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        for (i, c) in p.coords.iter().enumerate() {
            let (cx, cy) = cells[i / 2];
            assert!(c[0] >= cx && c[0] < cx + 1.0 && c[1] >= cy && c[1] < cy + 1.0);
        }
        assert!(generate_domain(3, 2, &mut rng).is_err());
    }

    #[test]
    fn cell_means_near_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 10_000;
        let p = generate_domain(4, k, &mut rng).unwrap();
        let se = (1.0f64 / 12.0).sqrt() / (k as f64).sqrt();
        for blk in 0..4 {
            let pts = &p.coords[blk * k..(blk + 1) * k];
            let mx = pts.iter().map(|c| c[0]).sum::<f64>() / k as f64;
            let my = pts.iter().map(|c| c[1]).sum::<f64>() / k as f64;
            let (cx, cy) = ((blk % 2) as f64 + 0.5, (blk / 2) as f64 + 0.5);
            assert!((mx - cx).abs() < 3.0 * se && (my - cy).abs() < 3.0 * se);
        }
    }

    #[test]
    fn noiseless_limit() {
        let cov = CovarianceParams::new(1e-14, 0.5, 1e-14).unwrap();
        let d = simulate(&cfg(3, 4, 2.5, cov, 7)).unwrap();
        for i in 0..d.n() {
            assert!((d.y[i] - 2.5 * d.x[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn pure_noise_variance() {
        let cov = CovarianceParams::new(1e-12, 0.5, 1.0).unwrap();
        let d = simulate(&cfg(20, 25, 0.0, cov, 3)).unwrap();
        let n = d.n() as f64;
        let m = d.y.iter().sum::<f64>() / n;
        let v = d.y.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (2.0 / n).sqrt();
        assert!((v - 1.0).abs() < 3.0 * se, "var {v}");
    }

    #[test]
    fn residual_covariance_matches_sigma() {
        let cov = CovarianceParams::new(2.0, 0.5, 0.5).unwrap();
        let base = cfg(5, 4, 1.5, cov, 0);
        let reps = 2000;
        // a common domain: simulate once per replicate and keep the first domain
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts = generate_domain(4, 5, &mut rng).unwrap();
        let r = exp_correlation(&pts, 0.5).unwrap();
        let sigma = build_sigma(&r, &cov);
        let chol = chol_jittered(&(r.entries.clone() * 2.0)).unwrap();
        let n = 20;
        let mut acc = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut sq = nalgebra::DMatrix::<f64>::zeros(n, n);
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep as u64);
            let d = simulate_on(&base, &pts, &chol, &mut rng).unwrap();
            let e = DVector::from_fn(n, |i, _| d.y[i] - 1.5 * d.x[i]);
            let outer = &e * e.transpose();
            sq += outer.map(|v| v * v);
            acc += outer;
        }
        let mean = &acc / reps as f64;
        for i in 0..n {
            for j in 0..n {
                let var = sq[(i, j)] / reps as f64 - mean[(i, j)].powi(2);
                let se = (var / reps as f64).sqrt();
                assert!((mean[(i, j)] - sigma[(i, j)]).abs() < 4.0 * se + 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cov = CovarianceParams::new(5.0, 0.5, 0.5).unwrap();
        let mut c = cfg(4, 9, 2.0, cov, 42);
        c.perm_x = PermSpec::RandomHamming;
        c.perm_s = PermSpec::Hamming(3);
        assert_eq!(simulate(&c).unwrap(), simulate(&c).unwrap());
        let d = simulate(&c).unwrap();
        let t = d.truth.unwrap();
        assert_eq!(hamming(&t.pi_s, &Permutation::identity(4)).unwrap(), 3);
    }

    #[test]
    fn model_holds_after_simulation() {
        let cov = CovarianceParams::new(1.0, 0.5, 1e-14).unwrap();
        let mut c = cfg(4, 4, 3.0, cov, 5);
        c.perm_x = PermSpec::Hamming(4);
        c.perm_s = PermSpec::Hamming(2);
        let d = simulate(&c).unwrap();
        let t = d.truth.as_ref().unwrap();
        let px = apply_blocks(&t.pi_x, &d.x);
        let ps = apply_blocks(&t.pi_s, &t.w);
        for i in 0..d.n() {
            assert!((d.y[i] - 3.0 * px[i] - ps[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn shuffle_identity_and_inverse() {
        let cov = CovarianceParams::new(5.0, 0.5, 0.5).unwrap();
        let d = simulate(&cfg(4, 4, 2.0, cov, 1)).unwrap();
        let id = Permutation::identity(4);
        assert_eq!(shuffle_within_blocks(&d, &id, &id).unwrap(), d);
        let p = Permutation::new(vec![2, 3, 1, 0]).unwrap();
        let q = Permutation::new(vec![1, 0, 3, 2]).unwrap();
        let s = shuffle_within_blocks(&d, &p, &q).unwrap();
        let back = shuffle_within_blocks(&s, &p.inverse(), &q.inverse()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn shuffle_keeps_model_and_hamming() {
        let cov = CovarianceParams::new(1.0, 0.5, 1e-14).unwrap();
        let d = simulate(&cfg(5, 4, 3.0, cov, 8)).unwrap();
        let p = Permutation::new(vec![1, 2, 0, 4, 3]).unwrap();
        let q = Permutation::new(vec![4, 1, 2, 3, 0]).unwrap();
        let s = shuffle_within_blocks(&d, &p, &q).unwrap();
        let t = s.truth.as_ref().unwrap();
        assert_eq!(t.pi_x, p);
        assert_eq!(t.pi_s, q);
        let px = apply_blocks(&t.pi_x, &s.x);
        let ps = apply_blocks(&t.pi_s, &t.w);
        for i in 0..s.n() {
            assert!((s.y[i] - 3.0 * px[i] - ps[i]).abs() < 1e-5);
        }
        let moved = (0..s.n()).filter(|&i| s.x[i] != d.x[i]).count();
        assert_eq!(moved, 4 * hamming(&p, &Permutation::identity(5)).unwrap());
        let u = unshuffle_with_truth(&s).unwrap();
        assert_eq!(u, d);
    }

    #[test]
    fn csv_round_trip() {
        let cov = CovarianceParams::new(5.0, 0.5, 0.5).unwrap();
        let d = simulate(&cfg(3, 4, 2.0, cov, 2)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d.without_truth());
    }

    #[test]
    fn csv_errors_carry_line() {
        let text = "x1,x2,X,Y,block_id\n0,0,1,2,0\n0,0,abc,2,0\n";
        match Dataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
