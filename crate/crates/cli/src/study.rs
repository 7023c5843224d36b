//! Simulation study: grid cells x replicates x methods.
//!
//! Outputs in the study directory:
//! `config.txt` (resolved configuration), `replicates.csv` (one row per
//! replicate and method, appended cell by cell), `timings.csv` (wall time per
//! fit, kept apart so the other files are reproducible byte for byte) and
//! `metrics.csv` (aggregated per cell and method).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use unlinked_core::baselines::{areal_gp_fit, full_gp_fit};
use unlinked_core::covkernel::{build_sigma, exp_correlation};
use unlinked_core::oracle::{brute_force_mle, from_pi12, DEFAULT_K_LIMIT};
use unlinked_core::permops::random_perm_with_hamming;
use unlinked_core::repair::{fit, FitConfig};
use unlinked_core::seeding::{replicate_seed, splitmix64};
use unlinked_core::simulate::{simulate, Dataset, PermSpec, SimConfig};
use unlinked_core::CovarianceParams;

use crate::config::{ExperimentConfig, HammingChoice, Method};

/// A cell is flagged when more than this fraction of its fits failed.
pub const FAILURE_FLAG_FRACTION: f64 = 0.1;

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub cell: usize,
    pub k: usize,
    pub b: usize,
    pub beta: f64,
    pub cov: CovarianceParams,
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub beta_hat: Option<f64>,
    pub pi_x_ok: Option<bool>,
    pub pi_s_ok: Option<bool>,
    pub sigma2_hat: Option<f64>,
    pub phi_hat: Option<f64>,
    pub tau2_hat: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

impl ReplicateResult {
    fn blank(cell: usize, (k, b, beta): (usize, usize, f64), cov: CovarianceParams, rep: usize, seed: u64, method: Method) -> Self {
        Self {
            cell,
            k,
            b,
            beta,
            cov,
            rep,
            seed,
            method,
            beta_hat: None,
            pi_x_ok: None,
            pi_s_ok: None,
            sigma2_hat: None,
            phi_hat: None,
            tau2_hat: None,
            iterations: None,
            converged: None,
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some() || self.beta_hat.is_none_or(|b| !b.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub cell: usize,
    pub rep: usize,
    pub method: Method,
    pub seconds: f64,
}

/// Aggregate of one method over the replicates of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    pub b: usize,
    pub beta: f64,
    pub method: Method,
    pub replicates: usize,
    pub failures: usize,
    pub flagged: bool,
    /// `RMSE(beta_hat) / |beta|`, or the plain RMSE when `beta = 0`.
    pub scaled_rmse: f64,
    pub recovery_x: Option<f64>,
    pub recovery_s: Option<f64>,
    pub rmse_sigma2: Option<f64>,
    pub rmse_phi: Option<f64>,
    pub rmse_tau2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub metrics: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateResult>,
    pub timings: Vec<Timing>,
}

fn cell_perm_specs(cfg: &ExperimentConfig, cell: usize, k: usize) -> Result<(PermSpec, PermSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(cfg.seed, cell as u64, u64::MAX));
    let pick = |h: HammingChoice, rng: &mut ChaCha8Rng| match h {
        HammingChoice::Fixed(h) => h,
        HammingChoice::Random if k >= 2 => rng.random_range(2..=k),
        HammingChoice::Random => 0,
    };
    let hx = pick(cfg.h_x, &mut rng);
    let hs = pick(cfg.h_s, &mut rng);
    if cfg.freeze_perms {
        Ok((
            PermSpec::Fixed(random_perm_with_hamming(k, hx, &mut rng)?),
            PermSpec::Fixed(random_perm_with_hamming(k, hs, &mut rng)?),
        ))
    } else {
        Ok((PermSpec::Hamming(hx), PermSpec::Hamming(hs)))
    }
}

fn fill_repair(r: &mut ReplicateResult, data: &Dataset, cfg: &ExperimentConfig, fit_seed: u64) -> unlinked_core::Result<()> {
    let truth = data.truth.as_ref().expect("simulated data carry truth");
    let fc = FitConfig { seed: fit_seed, ..cfg.fit.clone() };
    let rep = fit(&data.without_truth(), &cfg.priors, &fc)?;
    r.beta_hat = Some(rep.beta_mean);
    r.pi_x_ok = Some(rep.pi_x_hat == truth.pi_x);
    r.pi_s_ok = Some(rep.pi_s_hat == truth.pi_s);
    r.sigma2_hat = Some(rep.sigma2_hat);
    r.phi_hat = Some(rep.phi_hat);
    r.tau2_hat = Some(rep.tau2_hat);
    r.iterations = Some(rep.iterations);
    r.converged = Some(rep.converged);
    Ok(())
}

fn fill_gls(r: &mut ReplicateResult, f: unlinked_core::baselines::GLSFit) {
    r.beta_hat = Some(f.beta_hat);
    r.sigma2_hat = Some(f.cov_hat.sigma2);
    r.phi_hat = Some(f.cov_hat.phi);
    r.tau2_hat = Some(f.cov_hat.tau2);
    r.iterations = Some(f.n_evals as usize);
    r.converged = Some(f.converged);
}

fn fill_oracle(r: &mut ReplicateResult, data: &Dataset, cov: &CovarianceParams) -> unlinked_core::Result<()> {
    let truth = data.truth.as_ref().expect("simulated data carry truth");
    let sigma = build_sigma(&exp_correlation(&data.points, cov.phi)?, cov);
    let sol = brute_force_mle(&data.without_truth(), &sigma, DEFAULT_K_LIMIT)?;
    let (px, ps) = from_pi12(&sol.pi1_hat, &sol.pi2_hat);
    r.beta_hat = Some(sol.beta_hat);
    r.pi_x_ok = Some(px == truth.pi_x);
    r.pi_s_ok = Some(ps == truth.pi_s);
    Ok(())
}

fn run_replicate(
    cfg: &ExperimentConfig,
    cell: usize,
    key: (usize, usize, f64),
    specs: &(PermSpec, PermSpec),
    rep: usize,
) -> (Vec<ReplicateResult>, Vec<Timing>) {
    let seed = replicate_seed(cfg.seed, cell as u64, rep as u64);
    let (k, b, beta) = key;
    let sim = SimConfig { k, b, beta, cov: cfg.cov, perm_x: specs.0.clone(), perm_s: specs.1.clone(), seed };
    let data = simulate(&sim);
    let mut results = Vec::with_capacity(cfg.methods.len());
    let mut timings = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let mut r = ReplicateResult::blank(cell, key, cfg.cov, rep, seed, m);
        let start = Instant::now();
        let outcome = match &data {
            Err(e) => Err(e.clone()),
            Ok(d) => match m {
                Method::Repair => fill_repair(&mut r, d, cfg, splitmix64(seed ^ 0x5EED)),
                Method::FullGp => full_gp_fit(d, &cfg.baseline_init).map(|f| fill_gls(&mut r, f)),
                Method::ArealGp => areal_gp_fit(&d.without_truth(), &cfg.baseline_init).map(|f| fill_gls(&mut r, f)),
                Method::Oracle => fill_oracle(&mut r, d, &cfg.cov),
            },
        };
        if let Err(e) = outcome {
            r.error = Some(e.to_string());
        }
        timings.push(Timing { cell, rep, method: m, seconds: start.elapsed().as_secs_f64() });
        results.push(r);
    }
    (results, timings)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

const REPLICATE_HEADER: [&str; 19] = [
    "cell", "K", "B", "beta", "sigma2", "phi", "tau2", "rep", "seed", "method", "beta_hat", "pi_x_ok",
    "pi_s_ok", "sigma2_hat", "phi_hat", "tau2_hat", "iterations", "converged", "error",
];

fn replicate_record(r: &ReplicateResult) -> Vec<String> {
    vec![
        r.cell.to_string(),
        r.k.to_string(),
        r.b.to_string(),
        r.beta.to_string(),
        r.cov.sigma2.to_string(),
        r.cov.phi.to_string(),
        r.cov.tau2.to_string(),
        r.rep.to_string(),
        r.seed.to_string(),
        r.method.to_string(),
        opt(&r.beta_hat),
        opt(&r.pi_x_ok),
        opt(&r.pi_s_ok),
        opt(&r.sigma2_hat),
        opt(&r.phi_hat),
        opt(&r.tau2_hat),
        opt(&r.iterations),
        opt(&r.converged),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn write_replicates_csv<W: Write>(rows: &[ReplicateResult], w: W, header: bool) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if header {
        wr.write_record(REPLICATE_HEADER)?;
    }
    for r in rows {
        wr.write_record(replicate_record(r))?;
    }
    wr.flush()?;
    Ok(())
}

fn parse_opt<T: std::str::FromStr>(s: &str, line: u64, col: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>().map(Some).map_err(|_| anyhow!("line {line}: bad {col} value {s:?}"))
}

fn parse_req<T: std::str::FromStr>(s: &str, line: u64, col: &str) -> Result<T> {
    parse_opt(s, line, col)?.ok_or_else(|| anyhow!("line {line}: missing {col}"))
}

pub fn read_replicates_csv<R: std::io::Read>(r: R) -> Result<Vec<ReplicateResult>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != REPLICATE_HEADER {
        return Err(anyhow!("unexpected replicates header {header:?}"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(i).unwrap_or("");
        out.push(ReplicateResult {
            cell: parse_req(f(0), line, "cell")?,
            k: parse_req(f(1), line, "K")?,
            b: parse_req(f(2), line, "B")?,
            beta: parse_req(f(3), line, "beta")?,
            cov: CovarianceParams {
                sigma2: parse_req(f(4), line, "sigma2")?,
                phi: parse_req(f(5), line, "phi")?,
                tau2: parse_req(f(6), line, "tau2")?,
            },
            rep: parse_req(f(7), line, "rep")?,
            seed: parse_req(f(8), line, "seed")?,
            method: f(9).parse().with_context(|| format!("line {line}"))?,
            beta_hat: parse_opt(f(10), line, "beta_hat")?,
            pi_x_ok: parse_opt(f(11), line, "pi_x_ok")?,
            pi_s_ok: parse_opt(f(12), line, "pi_s_ok")?,
            sigma2_hat: parse_opt(f(13), line, "sigma2_hat")?,
            phi_hat: parse_opt(f(14), line, "phi_hat")?,
            tau2_hat: parse_opt(f(15), line, "tau2_hat")?,
            iterations: parse_opt(f(16), line, "iterations")?,
            converged: parse_opt(f(17), line, "converged")?,
            error: Some(f(18).to_owned()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

fn rmse(errs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = errs.collect();
    (!v.is_empty()).then(|| (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt())
}

fn rate(v: impl Iterator<Item = bool>) -> Option<f64> {
    let v: Vec<bool> = v.collect();
    (!v.is_empty()).then(|| v.iter().filter(|&&x| x).count() as f64 / v.len() as f64)
}

/// Aggregates replicate rows per (cell, method). The output does not depend
/// on the order of the input rows.
pub fn aggregate(rows: &[ReplicateResult]) -> Vec<MetricsRow> {
    let mut groups: BTreeMap<(usize, Method), Vec<&ReplicateResult>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.cell, r.method)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (_, mut g) in groups {
        g.sort_by_key(|r| r.rep);
        let first = g[0];
        let ok: Vec<&&ReplicateResult> = g.iter().filter(|r| !r.failed()).collect();
        let failures = g.len() - ok.len();
        let beta = first.beta;
        let scale = if beta != 0.0 { beta.abs() } else { 1.0 };
        let cov = first.cov;
        out.push(MetricsRow {
            k: first.k,
            b: first.b,
            beta,
            method: first.method,
            replicates: g.len(),
            failures,
            flagged: failures as f64 > FAILURE_FLAG_FRACTION * g.len() as f64,
            scaled_rmse: rmse(ok.iter().filter_map(|r| r.beta_hat).map(|b| b - beta)).map_or(f64::NAN, |e| e / scale),
            recovery_x: rate(ok.iter().filter_map(|r| r.pi_x_ok)),
            recovery_s: rate(ok.iter().filter_map(|r| r.pi_s_ok)),
            rmse_sigma2: rmse(ok.iter().filter_map(|r| r.sigma2_hat).map(|v| v - cov.sigma2)),
            rmse_phi: rmse(ok.iter().filter_map(|r| r.phi_hat).map(|v| v - cov.phi)),
            rmse_tau2: rmse(ok.iter().filter_map(|r| r.tau2_hat).map(|v| v - cov.tau2)),
        });
    }
    out
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "K", "B", "beta", "method", "replicates", "failures", "flagged", "scaled_rmse", "recovery_x",
        "recovery_s", "rmse_sigma2", "rmse_phi", "rmse_tau2",
    ])?;
    for r in rows {
        wr.write_record([
            r.k.to_string(),
            r.b.to_string(),
            r.beta.to_string(),
            r.method.to_string(),
            r.replicates.to_string(),
            r.failures.to_string(),
            r.flagged.to_string(),
            r.scaled_rmse.to_string(),
            opt(&r.recovery_x),
            opt(&r.recovery_s),
            opt(&r.rmse_sigma2),
            opt(&r.rmse_phi),
            opt(&r.rmse_tau2),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: Write>(rows: &[Timing], w: W, header: bool) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if header {
        wr.write_record(["cell", "rep", "method", "seconds"])?;
    }
    for t in rows {
        wr.write_record([t.cell.to_string(), t.rep.to_string(), t.method.to_string(), t.seconds.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new().append(true).open(path).with_context(|| format!("opening {}", path.display()))
}

/// Runs every cell of the grid. `jobs = 0` uses all available cores.
/// Replicate seeds are `replicate_seed(seed, cell, rep)`, so results are
/// identical for any `jobs`.
pub fn run_simulation_study(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.txt"), cfg.to_record().to_string())?;
    let rep_path = dir.join("replicates.csv");
    let time_path = dir.join("timings.csv");
    write_replicates_csv(&[], File::create(&rep_path)?, true)?;
    write_timings_csv(&[], File::create(&time_path)?, true)?;

    let mut all = Vec::new();
    let mut times = Vec::new();
    for (ci, key) in cfg.cells().into_iter().enumerate() {
        let specs = cell_perm_specs(cfg, ci, key.0)?;
        let per_rep: Vec<(Vec<ReplicateResult>, Vec<Timing>)> = pool.install(|| {
            (0..cfg.replicates).into_par_iter().map(|rep| run_replicate(cfg, ci, key, &specs, rep)).collect()
        });
        let (res, tim): (Vec<_>, Vec<_>) = per_rep.into_iter().unzip();
        let res: Vec<ReplicateResult> = res.into_iter().flatten().collect();
        let tim: Vec<Timing> = tim.into_iter().flatten().collect();
        write_replicates_csv(&res, append(&rep_path)?, false)?;
        write_timings_csv(&tim, append(&time_path)?, false)?;
        all.extend(res);
        times.extend(tim);
    }
    let metrics = aggregate(&all);
    write_metrics_csv(&metrics, File::create(dir.join("metrics.csv"))?)?;
    Ok(StudyOutput { metrics, replicates: all, timings: times })
}

/// Re-aggregates `replicates.csv` in `dir` into `metrics.csv`.
pub fn report(dir: &Path) -> Result<Vec<MetricsRow>> {
    let path = dir.join("replicates.csv");
    let rows = read_replicates_csv(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?;
    let metrics = aggregate(&rows);
    write_metrics_csv(&metrics, File::create(dir.join("metrics.csv"))?)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(rep: usize, method: Method, beta_hat: Option<f64>, x: Option<bool>) -> ReplicateResult {
        let mut r = ReplicateResult::blank(0, (3, 4, 2.0), CovarianceParams { sigma2: 1.0, phi: 0.5, tau2: 0.1 }, rep, 9, method);
        r.beta_hat = beta_hat;
        r.pi_x_ok = x;
        r.pi_s_ok = x.map(|v| !v);
        r
    }

    #[test]
    fn aggregation_is_order_free_and_counts_failures() {
        let mut rows = vec![
            row(0, Method::Repair, Some(2.2), Some(true)),
            row(1, Method::Repair, Some(1.8), Some(false)),
            row(2, Method::Repair, None, None),
            row(0, Method::ArealGp, Some(3.0), None),
        ];
        let a = aggregate(&rows);
        rows.reverse();
        assert_eq!(aggregate(&rows), a);
        let r = &a[0];
        assert_eq!((r.method, r.replicates, r.failures, r.flagged), (Method::Repair, 3, 1, true));
        assert!((r.scaled_rmse - 0.1).abs() < 1e-12);
        assert_eq!((r.recovery_x, r.recovery_s), (Some(0.5), Some(0.5)));
        assert_eq!(a[1].recovery_x, None);
    }

    #[test]
    fn replicate_csv_round_trip() {
        let mut rows = vec![row(0, Method::Oracle, Some(2.5), Some(true)), row(1, Method::FullGp, None, None)];
        rows[1].error = Some("matrix is not positive definite, pivot 3".into());
        rows[0].sigma2_hat = Some(0.1 + 0.2);
        let mut buf = Vec::new();
        write_replicates_csv(&rows, &mut buf, true).unwrap();
        assert_eq!(read_replicates_csv(buf.as_slice()).unwrap(), rows);
    }
}
