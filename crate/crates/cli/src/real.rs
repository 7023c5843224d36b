//! Real-data workflow: ingest a linked table, block it, shuffle within
//! blocks, and compare the methods against the linked fit.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use unlinked_core::baselines::{areal_gp_fit, full_gp_fit, kriging_field};
use unlinked_core::covkernel::{chol_jittered, exp_correlation};
use unlinked_core::permops::{apply_blocks, Permutation};
use unlinked_core::repair::{fit, FitConfig, Priors};
use unlinked_core::seeding::replicate_seed;
use unlinked_core::simulate::{shuffle_within_blocks, unshuffle_with_truth, Dataset};
use unlinked_core::{CovarianceParams, DomainPoints};

use crate::config::Method;

/// Environment variable naming a user-supplied Meuse table.
pub const MEUSE_ENV: &str = "UNLINKED_MEUSE_CSV";

/// `blocks x size` partition, written `30x5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub blocks: usize,
    pub size: usize,
}

impl Blocking {
    pub fn rows(&self) -> usize {
        self.blocks * self.size
    }
}

impl FromStr for Blocking {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| anyhow!("blocking {s:?} is not of the form BLOCKSxSIZE"))?;
        let blocks: usize = a.trim().parse().with_context(|| format!("blocking {s:?}"))?;
        let size: usize = b.trim().parse().with_context(|| format!("blocking {s:?}"))?;
        if blocks == 0 || size == 0 {
            bail!("blocking {s:?} has an empty dimension");
        }
        Ok(Self { blocks, size })
    }
}

impl fmt::Display for Blocking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.blocks, self.size)
    }
}

/// One observation: coordinates, exposure, outcome.
pub type Row = [f64; 4];

/// Reads columns `x1, x2, X, Y` (any order, extra columns ignored).
pub fn read_table<R: Read>(r: R) -> Result<Vec<Row>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().context("reading header")?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| anyhow!("missing column {name:?} in header"))
    };
    let idx = [col("x1")?, col("x2")?, col("X")?, col("Y")?];
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut row = [0.0; 4];
        for (slot, &i) in row.iter_mut().zip(&idx) {
            let field = rec.get(i).unwrap_or("").trim();
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| anyhow!("line {line}: bad number {field:?} in column {}", header.get(i).unwrap_or("?")))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub blocking: Blocking,
    /// Rows removed at random before blocking.
    pub drop: usize,
    pub seed: u64,
    /// Replace the outcome by `ln(1 + Y)` before centering.
    pub log1p_outcome: bool,
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Centers exposure and outcome, maps coordinates into the unit square with
/// one common scale, drops `drop` random rows, sorts by the first
/// coordinate and cuts contiguous blocks. Rows beyond the blocking are also
/// dropped at random.
pub fn ingest_rows(rows: &[Row], opts: &IngestOptions) -> Result<Dataset> {
    let need = opts.blocking.rows() + opts.drop;
    if rows.len() < need {
        bail!("{} rows cannot fill blocking {} after dropping {}", rows.len(), opts.blocking, opts.drop);
    }
    let mut rows = rows.to_vec();
    if opts.log1p_outcome {
        for r in &mut rows {
            if r[3] <= -1.0 {
                bail!("outcome {} has no ln(1 + Y)", r[3]);
            }
            r[3] = r[3].ln_1p();
        }
    }
    let mut xs: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let mut ys: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    center(&mut xs);
    center(&mut ys);
    let lo = |c: usize| rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
    let hi = |c: usize| rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
    let (lo0, lo1) = (lo(0), lo(1));
    let span = (hi(0) - lo0).max(hi(1) - lo1);
    let span = if span > 0.0 { span } else { 1.0 };
    let mut table: Vec<Row> = (0..rows.len())
        .map(|i| [(rows[i][0] - lo0) / span, (rows[i][1] - lo1) / span, xs[i], ys[i]])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let surplus = table.len() - opts.blocking.rows();
    let mut gone = index::sample(&mut rng, table.len(), surplus).into_vec();
    gone.sort_unstable();
    for &i in gone.iter().rev() {
        table.remove(i);
    }
    table.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));

    let points = DomainPoints::new(table.iter().map(|r| [r[0], r[1]]).collect())?;
    Ok(Dataset::new(
        points,
        table.iter().map(|r| r[2]).collect(),
        table.iter().map(|r| r[3]).collect(),
        opts.blocking.size,
        opts.blocking.blocks,
    )?)
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_table(f).with_context(|| format!("in {}", path.display()))?;
    ingest_rows(&rows, opts)
}

/// Meuse-like synthetic table: 155 sites on a rectangle, a standardized
/// exposure, a smooth latent surface and small noise, with a negative
/// effect of `beta`.
pub fn synthetic_standin(n: usize, beta: f64, seed: u64) -> Result<Vec<Row>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[f64; 2]> =
        (0..n).map(|_| [rng.random_range(0.0..2800.0), rng.random_range(0.0..3900.0)]).collect();
    let scaled = DomainPoints::new(coords.iter().map(|c| [c[0] / 3900.0, c[1] / 3900.0]).collect())?;
    let cov = CovarianceParams::new(0.3, 0.15, 0.05)?;
    let chol = chol_jittered(&(exp_correlation(&scaled, cov.phi)?.entries * cov.sigma2))?;
    let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = chol.l() * z;
    Ok((0..n)
        .map(|i| {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            [coords[i][0], coords[i][1], x, beta * x + w[i] + cov.tau2.sqrt() * e]
        })
        .collect())
}

pub fn write_table<W: Write>(rows: &[Row], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x1", "x2", "X", "Y"])?;
    for r in rows {
        wr.write_record(r.iter().map(f64::to_string))?;
    }
    wr.flush()?;
    Ok(())
}

/// One method's result under one blocking.
#[derive(Debug, Clone, PartialEq)]
pub struct RealRow {
    pub blocking: Blocking,
    pub method: Method,
    pub beta_hat: f64,
    pub pi_x_recovered: Option<bool>,
    pub pi_s_recovered: Option<bool>,
    /// Correlation of the aligned latent surface with the linked fit's.
    pub surface_corr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealOptions {
    pub blockings: Vec<Blocking>,
    pub drop: usize,
    pub seed: u64,
    pub log1p_outcome: bool,
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    pub priors: Priors,
    pub baseline_init: CovarianceParams,
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn uniform_perm(k: usize, rng: &mut ChaCha8Rng) -> Result<Permutation> {
    let mut m: Vec<usize> = (0..k).collect();
    m.shuffle(rng);
    Ok(Permutation::new(m)?)
}

/// Fits every method under every blocking of the linked table `rows`.
pub fn run_real_data(rows: &[Row], opts: &RealOptions) -> Result<Vec<RealRow>> {
    let mut out = Vec::new();
    for (bi, &blocking) in opts.blockings.iter().enumerate() {
        let ingest = IngestOptions {
            blocking,
            drop: opts.drop,
            seed: replicate_seed(opts.seed, bi as u64, 0),
            log1p_outcome: opts.log1p_outcome,
        };
        let linked = ingest_rows(rows, &ingest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(opts.seed, bi as u64, 1));
        let px = uniform_perm(blocking.size, &mut rng)?;
        let ps = uniform_perm(blocking.size, &mut rng)?;
        let data = shuffle_within_blocks(&linked, &px, &ps)?;
        let blind = data.without_truth();

        let full = full_gp_fit(&data, &opts.baseline_init)?;
        let u = unshuffle_with_truth(&data)?;
        let surface = kriging_field(&u.points, &u.x, &u.y, &full)?;
        for &m in &opts.methods {
            let row = match m {
                Method::FullGp => RealRow {
                    blocking,
                    method: m,
                    beta_hat: full.beta_hat,
                    pi_x_recovered: None,
                    pi_s_recovered: None,
                    surface_corr: Some(1.0),
                },
                Method::ArealGp => RealRow {
                    blocking,
                    method: m,
                    beta_hat: areal_gp_fit(&blind, &opts.baseline_init)?.beta_hat,
                    pi_x_recovered: None,
                    pi_s_recovered: None,
                    surface_corr: None,
                },
                Method::Repair => {
                    let fc = FitConfig { seed: replicate_seed(opts.seed, bi as u64, 2), ..opts.fit.clone() };
                    let rep = fit(&blind, &opts.priors, &fc)?;
                    let aligned = apply_blocks(&rep.pi_s_hat, &rep.mu_w);
                    RealRow {
                        blocking,
                        method: m,
                        beta_hat: rep.beta_mean,
                        pi_x_recovered: Some(rep.pi_x_hat == px),
                        pi_s_recovered: Some(rep.pi_s_hat == ps),
                        surface_corr: Some(correlation(&aligned, &surface)),
                    }
                }
                Method::Oracle => bail!("the oracle method needs the true covariance and is simulation-only"),
            };
            out.push(row);
        }
    }
    Ok(out)
}

pub fn write_real_csv<W: Write>(rows: &[RealRow], w: W) -> Result<()> {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["blocking", "method", "beta_hat", "pi_x_recovered", "pi_s_recovered", "surface_corr"])?;
    for r in rows {
        wr.write_record([
            r.blocking.to_string(),
            r.method.to_string(),
            r.beta_hat.to_string(),
            opt(r.pi_x_recovered.map(|v| v.to_string())),
            opt(r.pi_s_recovered.map(|v| v.to_string())),
            opt(r.surface_corr.map(|v| v.to_string())),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
