//! Experiment configuration read from flat `key = value` files.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use unlinked_core::record::Record;
use unlinked_core::repair::{FitConfig, Priors};
use unlinked_core::CovarianceParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Repair,
    FullGp,
    ArealGp,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Repair, Method::FullGp, Method::ArealGp, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Repair => "repair",
            Method::FullGp => "fullgp",
            Method::ArealGp => "arealgp",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| anyhow!("unknown method {s:?} (expected repair, fullgp, arealgp or oracle)"))
    }
}

/// Parses a comma-separated method list, dropping duplicates.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("method list is empty");
    }
    Ok(out)
}

/// Within-block Hamming distance of a simulated permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HammingChoice {
    Fixed(usize),
    /// Drawn once per grid cell from `{2, ..., K}`, shared by its replicates.
    Random,
}

impl FromStr for HammingChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "random" => Ok(HammingChoice::Random),
            v => Ok(HammingChoice::Fixed(v.parse().with_context(|| format!("bad Hamming distance {v:?}"))?)),
        }
    }
}

impl fmt::Display for HammingChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HammingChoice::Fixed(h) => write!(f, "{h}"),
            HammingChoice::Random => f.write_str("random"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub grid_k: Vec<usize>,
    pub grid_b: Vec<usize>,
    pub grid_beta: Vec<f64>,
    pub cov: CovarianceParams,
    pub h_x: HammingChoice,
    pub h_s: HammingChoice,
    /// Use one permutation pair per cell instead of one per replicate.
    pub freeze_perms: bool,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fit: FitConfig,
    pub priors: Priors,
    /// Starting covariance of the likelihood baselines.
    pub baseline_init: CovarianceParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Repair, Method::FullGp, Method::ArealGp],
            grid_k: vec![4],
            grid_b: vec![25],
            grid_beta: vec![8.0],
            cov: CovarianceParams { sigma2: 5.0, phi: 0.5, tau2: 0.5 },
            h_x: HammingChoice::Random,
            h_s: HammingChoice::Random,
            freeze_perms: false,
            replicates: 20,
            seed: 1,
            out_dir: PathBuf::from("results"),
            fit: FitConfig::default(),
            priors: Priors::default(),
            baseline_init: CovarianceParams { sigma2: 1.0, phi: 0.3, tau2: 1.0 },
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let out: Vec<T> = v
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow!("{key}: bad entry {p:?}: {e}")))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        bail!("{key}: empty list");
    }
    Ok(out)
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key}: bad value {v:?}: {e}"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_record(r: &Record) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in r.entries() {
            let v = v.as_str();
            match k.as_str() {
                "methods" => c.methods = parse_methods(v)?,
                "grid.k" => c.grid_k = list(k, v)?,
                "grid.b" => c.grid_b = list(k, v)?,
                "grid.beta" => c.grid_beta = list(k, v)?,
                "sim.sigma2" => c.cov.sigma2 = one(k, v)?,
                "sim.phi" => c.cov.phi = one(k, v)?,
                "sim.tau2" => c.cov.tau2 = one(k, v)?,
                "sim.h_x" => c.h_x = v.parse()?,
                "sim.h_s" => c.h_s = v.parse()?,
                "sim.freeze_perms" => c.freeze_perms = one(k, v)?,
                "replicates" => c.replicates = one(k, v)?,
                "seed" => c.seed = one(k, v)?,
                "out" => c.out_dir = PathBuf::from(v),
                "fit.elbo_tol" => c.fit.elbo_tol = one(k, v)?,
                "fit.max_outer_iters" => c.fit.max_outer_iters = one(k, v)?,
                "fit.min_outer_iters" => c.fit.min_outer_iters = one(k, v)?,
                "fit.lr_x" => c.fit.lr_x = one(k, v)?,
                "fit.lr_s" => c.fit.lr_s = one(k, v)?,
                "fit.perm_inner_steps" => c.fit.perm_inner_steps = one(k, v)?,
                "fit.mc_samples" => c.fit.mc_samples = one(k, v)?,
                "fit.phi_is_samples" => c.fit.phi_is_samples = one(k, v)?,
                "fit.tau0_x" => c.fit.tau0_x = one(k, v)?,
                "fit.tau0_s" => c.fit.tau0_s = one(k, v)?,
                "fit.tau_min" => c.fit.tau_min = one(k, v)?,
                "fit.anneal_rate" => c.fit.anneal_rate = one(k, v)?,
                "fit.v_min" => c.fit.v_min = one(k, v)?,
                "fit.v_max" => c.fit.v_max = one(k, v)?,
                "fit.v_init" => c.fit.v_init = one(k, v)?,
                "fit.freeze_permutations" => c.fit.freeze_permutations = one(k, v)?,
                "prior.sigma2_beta" => c.priors.sigma2_beta = one(k, v)?,
                "prior.a1" => c.priors.a1 = one(k, v)?,
                "prior.b1" => c.priors.b1 = one(k, v)?,
                "prior.a2" => c.priors.a2 = one(k, v)?,
                "prior.b2" => c.priors.b2 = one(k, v)?,
                "prior.eta_x2" => c.priors.eta_x2 = one(k, v)?,
                "prior.eta_s2" => c.priors.eta_s2 = one(k, v)?,
                "baseline.sigma2" => c.baseline_init.sigma2 = one(k, v)?,
                "baseline.phi" => c.baseline_init.phi = one(k, v)?,
                "baseline.tau2" => c.baseline_init.tau2 = one(k, v)?,
                other => bail!("unknown configuration key {other:?}"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_record(&Record::parse(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_k.is_empty() || self.grid_b.is_empty() || self.grid_beta.is_empty() {
            bail!("grid must be nonempty");
        }
        if self.replicates == 0 {
            bail!("replicates must be at least 1");
        }
        if self.methods.is_empty() {
            bail!("at least one method is required");
        }
        self.cov.validate()?;
        self.baseline_init.validate()?;
        self.fit.validate()?;
        self.priors.validate()?;
        for &b in &self.grid_b {
            let g = (b as f64).sqrt().round() as usize;
            if g * g != b {
                bail!("grid.b entry {b} is not a perfect square");
            }
        }
        for &k in &self.grid_k {
            if k == 0 {
                bail!("grid.k entries must be positive");
            }
            for h in [self.h_x, self.h_s] {
                if let HammingChoice::Fixed(h) = h {
                    if h == 1 || h > k {
                        bail!("Hamming distance {h} is infeasible for K = {k}");
                    }
                }
            }
            if self.methods.contains(&Method::Oracle) && k > unlinked_core::oracle::DEFAULT_K_LIMIT {
                bail!("oracle method needs K <= {}", unlinked_core::oracle::DEFAULT_K_LIMIT);
            }
        }
        Ok(())
    }

    /// All grid cells in `K`-major, then `B`, then `beta` order.
    pub fn cells(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &k in &self.grid_k {
            for &b in &self.grid_b {
                for &beta in &self.grid_beta {
                    out.push((k, b, beta));
                }
            }
        }
        out
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        let f = &self.fit;
        let p = &self.priors;
        r.push("methods", join(&self.methods));
        r.push("grid.k", join(&self.grid_k));
        r.push("grid.b", join(&self.grid_b));
        r.push("grid.beta", join(&self.grid_beta));
        r.push_f64("sim.sigma2", self.cov.sigma2);
        r.push_f64("sim.phi", self.cov.phi);
        r.push_f64("sim.tau2", self.cov.tau2);
        r.push("sim.h_x", self.h_x.to_string());
        r.push("sim.h_s", self.h_s.to_string());
        r.push("sim.freeze_perms", self.freeze_perms.to_string());
        r.push("replicates", self.replicates.to_string());
        r.push("seed", self.seed.to_string());
        r.push("out", self.out_dir.display().to_string());
        r.push_f64("fit.elbo_tol", f.elbo_tol);
        r.push("fit.max_outer_iters", f.max_outer_iters.to_string());
        r.push("fit.min_outer_iters", f.min_outer_iters.to_string());
        r.push_f64("fit.lr_x", f.lr_x);
        r.push_f64("fit.lr_s", f.lr_s);
        r.push("fit.perm_inner_steps", f.perm_inner_steps.to_string());
        r.push("fit.mc_samples", f.mc_samples.to_string());
        r.push("fit.phi_is_samples", f.phi_is_samples.to_string());
        r.push_f64("fit.tau0_x", f.tau0_x);
        r.push_f64("fit.tau0_s", f.tau0_s);
        r.push_f64("fit.tau_min", f.tau_min);
        r.push_f64("fit.anneal_rate", f.anneal_rate);
        r.push_f64("fit.v_min", f.v_min);
        r.push_f64("fit.v_max", f.v_max);
        r.push_f64("fit.v_init", f.v_init);
        r.push("fit.freeze_permutations", f.freeze_permutations.to_string());
        r.push_f64("prior.sigma2_beta", p.sigma2_beta);
        r.push_f64("prior.a1", p.a1);
        r.push_f64("prior.b1", p.b1);
        r.push_f64("prior.a2", p.a2);
        r.push_f64("prior.b2", p.b2);
        r.push_f64("prior.eta_x2", p.eta_x2);
        r.push_f64("prior.eta_s2", p.eta_s2);
        r.push_f64("baseline.sigma2", self.baseline_init.sigma2);
        r.push_f64("baseline.phi", self.baseline_init.phi);
        r.push_f64("baseline.tau2", self.baseline_init.tau2);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_record().to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parses_lists_and_rejects_typos() {
        let c = ExperimentConfig::parse("grid.k = 6, 8\ngrid.b = 49,81\nmethods = repair,oracle,repair\n").unwrap_err();
        assert!(c.to_string().contains("oracle"), "{c}");
        let c = ExperimentConfig::parse("grid.k = 3,4\ngrid.b = 9,16\nsim.h_x = 2\nfit.lr_x = 5\n").unwrap();
        assert_eq!(c.cells().len(), 4);
        assert_eq!(c.h_x, HammingChoice::Fixed(2));
        assert_eq!(c.fit.lr_x, 5.0);
        assert!(ExperimentConfig::parse("grid.kk = 3\n").is_err());
        assert!(ExperimentConfig::parse("grid.b = 10\n").is_err());
        assert!(ExperimentConfig::parse("sim.h_s = 1\n").is_err());
        assert!(ExperimentConfig::parse("replicates = 0\n").is_err());
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("fullgp, repair").unwrap(), vec![Method::FullGp, Method::Repair]);
        assert!(parse_methods("").is_err());
        assert!(parse_methods("gp").is_err());
    }
}
