//! Instance generation, flat key=value configs, and replicated experiments
//! persisted as CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::mdp::{self, Mdp, Policy};
use crate::spmd::{self, Evaluator, RunRecord, SpmdConfig};

/// Garnet-style random instance: each `(s, a)` moves to `branching` distinct
/// successors with broken-stick weights, blended toward the uniform kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub branching: usize,
    /// Weight `lambda` of the uniform kernel in the blend.
    pub ergodicity_mix: f64,
    pub cost_seed: u64,
    pub kernel_seed: u64,
    pub gamma: f64,
}

impl GeneratorSpec {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        branching: usize,
        ergodicity_mix: f64,
        cost_seed: u64,
        kernel_seed: u64,
    ) -> Self {
        Self { n_states, n_actions, branching, ergodicity_mix, cost_seed, kernel_seed, gamma: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidArgument("generator needs at least one state and action".into()));
        }
        if self.branching == 0 || self.branching > self.n_states {
            return Err(Error::InvalidArgument(format!(
                "branching={} must lie in 1..={}",
                self.branching, self.n_states
            )));
        }
        if !(0.0..=1.0).contains(&self.ergodicity_mix) {
            return Err(Error::InvalidArgument(format!("ergodicity_mix={} outside [0,1]", self.ergodicity_mix)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma={} outside (0,1)", self.gamma)));
        }
        Ok(())
    }
}

/// Draws an instance and checks that the uniform policy induces an ergodic chain.
pub fn generate_mdp(spec: &GeneratorSpec) -> Result<Mdp> {
    spec.validate()?;
    let (ns, na, b, lambda) = (spec.n_states, spec.n_actions, spec.branching, spec.ergodicity_mix);
    let mut kernel_rng = ChaCha8Rng::seed_from_u64(spec.kernel_seed);
    let mut cost_rng = ChaCha8Rng::seed_from_u64(spec.cost_seed);

    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let mut cuts: Vec<f64> = (0..b - 1).map(|_| kernel_rng.gen::<f64>()).collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        let mut row = vec![lambda / ns as f64; ns];
        for (succ, w) in sample(&mut kernel_rng, ns, b).into_iter().zip(cuts.windows(2)) {
            row[succ] += (1.0 - lambda) * (w[1] - w[0]);
        }
        let total: f64 = row.iter().sum();
        transition.extend(row.into_iter().map(|p| p / total));
    }
    let cost = (0..ns * na).map(|_| cost_rng.gen::<f64>()).collect();
    let mdp = Mdp::new(ns, na, transition, cost, spec.gamma)?;
    let (p, _) = mdp::induced_chain(&mdp, &Policy::uniform(ns, na));
    mdp::check_ergodic(&p, ns)?;
    Ok(mdp)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got `{line}`") })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate key `{key}`") });
        }
    }
    Ok(map)
}

/// Overlays `file` on `flags`; keys set in both take the file value with a warning.
pub fn merge_config(
    file: BTreeMap<String, String>,
    mut flags: BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    for (key, value) in file {
        if let Some(old) = flags.get(&key) {
            if *old != value {
                warn!("config file sets {key}={value}, overriding command-line {key}={old}");
            }
        }
        flags.insert(key, value);
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub enum MdpSource {
    File(PathBuf),
    Generate(GeneratorSpec),
}

impl MdpSource {
    pub fn load(&self) -> Result<Mdp> {
        match self {
            Self::File(path) => Mdp::load(path),
            Self::Generate(spec) => generate_mdp(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: MdpSource,
    pub spmd: SpmdConfig,
    pub replications: usize,
    pub out_dir: PathBuf,
    /// Iteration budgets of a sweep; empty outside sweep mode.
    pub sweep_k: Vec<usize>,
}

/// Keys understood by [`ExperimentConfig::from_map`].
pub const CONFIG_KEYS: &[&str] = &[
    "mdp.file",
    "gen.n_states",
    "gen.n_actions",
    "gen.branching",
    "gen.lambda",
    "gen.gamma",
    "gen.cost_seed",
    "gen.kernel_seed",
    "divergence",
    "evaluator",
    "k",
    "delta",
    "eps_target",
    "seed",
    "replications",
    "out_dir",
    "eta",
    "n",
    "m",
    "tau",
    "max_traj_len",
    "mixing_horizon",
    "sweep.k",
];

fn field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse {key}=`{v}`")))
        })
        .transpose()
}

fn field_or<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    Ok(field(map, key)?.unwrap_or(default))
}

impl ExperimentConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("unknown config key `{unknown}`")));
        }
        let source = match map.get("mdp.file") {
            Some(path) => {
                if map.keys().any(|k| k.starts_with("gen.")) {
                    return Err(Error::InvalidArgument("set either mdp.file or gen.*, not both".into()));
                }
                let path = PathBuf::from(path);
                if !path.exists() {
                    return Err(Error::InvalidArgument(format!("mdp file {} does not exist", path.display())));
                }
                MdpSource::File(path)
            }
            None => {
                let mut spec = GeneratorSpec::new(
                    field_or(map, "gen.n_states", 10)?,
                    field_or(map, "gen.n_actions", 5)?,
                    field_or(map, "gen.branching", 3)?,
                    field_or(map, "gen.lambda", 0.05)?,
                    field_or(map, "gen.cost_seed", 0)?,
                    field_or(map, "gen.kernel_seed", 1)?,
                );
                spec.gamma = field_or(map, "gen.gamma", 0.9)?;
                spec.validate()?;
                MdpSource::Generate(spec)
            }
        };
        let divergence: DivergenceKind = field_or(map, "divergence", DivergenceKind::Kl)?;
        let evaluator: Evaluator = field_or(map, "evaluator", Evaluator::TomcSingle)?;
        let mut spmd = SpmdConfig::new(divergence, evaluator, field_or(map, "k", 100)?);
        spmd.delta = field_or(map, "delta", spmd.delta)?;
        spmd.eps_target = field_or(map, "eps_target", spmd.eps_target)?;
        spmd.seed = field_or(map, "seed", 0)?;
        spmd.overrides.eta = field(map, "eta")?;
        spmd.overrides.n = field(map, "n")?;
        spmd.overrides.m = field(map, "m")?;
        spmd.overrides.tau = field(map, "tau")?;
        spmd.max_traj_len = field(map, "max_traj_len")?;
        spmd.mixing_horizon = field(map, "mixing_horizon")?;
        spmd.validate()?;
        let replications = field_or(map, "replications", 1)?;
        if replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        let sweep_k = match map.get("sweep.k") {
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&k| k > 0)
                        .ok_or_else(|| Error::InvalidArgument(format!("bad sweep.k entry `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            source,
            spmd,
            replications,
            out_dir: PathBuf::from(map.get("out_dir").map_or("out", String::as_str)),
            sweep_k,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_config(text)?)
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("log-log slope needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Aggregate over replications at one iteration budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub k: usize,
    pub replications: usize,
    pub mean_best_gap: f64,
    pub q05_best_gap: f64,
    pub median_best_gap: f64,
    pub q95_best_gap: f64,
    pub mean_iterate_gap: f64,
    /// Fraction of replications whose accumulated noise stayed inside the envelope.
    pub envelope_coverage: Option<f64>,
    pub three_point_violations: usize,
    pub floor_violations: usize,
    pub mean_samples: f64,
}

impl Summary {
    pub const HEADER: &'static str = "k,replications,mean_best_gap,q05_best_gap,median_best_gap,q95_best_gap,\
mean_iterate_gap,envelope_coverage,three_point_violations,floor_violations,mean_samples";

    pub fn from_records(k: usize, records: &[RunRecord]) -> Self {
        let r = records.len() as f64;
        let mut best: Vec<f64> = records.iter().map(RunRecord::final_gap).collect();
        best.sort_by(f64::total_cmp);
        let with_envelope: Vec<&RunRecord> = records.iter().filter(|rec| rec.schedule.z.is_some()).collect();
        let envelope_coverage = (!with_envelope.is_empty()).then(|| {
            with_envelope.iter().filter(|rec| rec.envelope_held()).count() as f64 / with_envelope.len() as f64
        });
        Self {
            k,
            replications: records.len(),
            mean_best_gap: best.iter().sum::<f64>() / r,
            q05_best_gap: quantile(&best, 0.05),
            median_best_gap: quantile(&best, 0.5),
            q95_best_gap: quantile(&best, 0.95),
            mean_iterate_gap: records.iter().map(|rec| rec.mean_iterate_gap).sum::<f64>() / r,
            envelope_coverage,
            three_point_violations: records.iter().map(|rec| rec.three_point_violations).sum(),
            floor_violations: records.iter().map(|rec| rec.floor_violations).sum(),
            mean_samples: records
                .iter()
                .map(|rec| rec.rows.last().map_or(0, |row| row.samples_cum) as f64)
                .sum::<f64>()
                / r,
        }
    }

    pub fn csv_row(&self) -> String {
        let coverage = self.envelope_coverage.map_or(String::new(), |c| c.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.replications,
            self.mean_best_gap,
            self.q05_best_gap,
            self.median_best_gap,
            self.q95_best_gap,
            self.mean_iterate_gap,
            coverage,
            self.three_point_violations,
            self.floor_violations,
            self.mean_samples
        )
    }
}

fn manifest(mdp: &Mdp, config: &ExperimentConfig, outcomes: &[Result<RunRecord>]) -> String {
    let mut out = String::new();
    let spmd = &config.spmd;
    writeln!(out, "states={}\nactions={}\ngamma={}", mdp.n_states(), mdp.n_actions(), mdp.gamma()).unwrap();
    writeln!(out, "divergence={}\nevaluator={}\nk={}", spmd.divergence, spmd.evaluator, spmd.k).unwrap();
    writeln!(out, "delta={}\nseed={}\nreplications={}", spmd.delta, spmd.seed, config.replications).unwrap();
    if let Some(rec) = outcomes.iter().find_map(|o| o.as_ref().ok()) {
        let s = &rec.schedule;
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        writeln!(out, "eta={}\nn_resolved={}\nn={}\nm={}\ntau={}", s.eta, s.n_resolved, s.n, s.m, s.tau).unwrap();
        writeln!(out, "eps={}\nZ={}\nD={}\nmu={}\nzeta={}", opt(s.eps), opt(s.z), opt(s.d_cap), s.mu, opt(s.zeta))
            .unwrap();
        let p = &rec.profile;
        writeln!(out, "C={}\nrho={}\nnu_lower={}\nf_star={}", p.c, p.rho, p.nu_min, rec.f_star).unwrap();
    }
    for (r, o) in outcomes.iter().enumerate() {
        match o {
            Ok(_) => writeln!(out, "replication.{r}=ok").unwrap(),
            Err(e) => writeln!(out, "replication.{r}=failed: {e}").unwrap(),
        }
    }
    out
}

/// Runs every replication, writes `run_<r>.csv`, `manifest.txt` and
/// `summary.csv` under `out_dir`, and fails if any replication aborted.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary> {
    let mdp = config.source.load()?;
    run_replications(&mdp, config, &config.out_dir)
}

fn run_replications(mdp: &Mdp, config: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    info!(
        "running {} replication(s) of {} / {} for k={}",
        config.replications, config.spmd.evaluator, config.spmd.divergence, config.spmd.k
    );
    let outcomes: Vec<Result<RunRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.spmd.clone();
            cfg.run_index = r as u64;
            spmd::run(mdp, &cfg)
        })
        .collect();
    for (r, o) in outcomes.iter().enumerate() {
        if let Ok(rec) = o {
            fs::write(dir.join(format!("run_{r}.csv")), rec.to_csv())?;
        }
    }
    fs::write(dir.join("manifest.txt"), manifest(mdp, config, &outcomes))?;
    let mut records = Vec::with_capacity(outcomes.len());
    let mut first_err = None;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => {
                warn!("replication {r} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let summary = Summary::from_records(config.spmd.k, &records);
    fs::write(dir.join("summary.csv"), format!("{}\n{}\n", Summary::HEADER, summary.csv_row()))?;
    Ok(summary)
}

/// Outcome of a sweep over iteration budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub points: Vec<Summary>,
    /// Fitted slope of `ln(mean best gap)` against `ln k`; `None` when undefined.
    pub slope: Option<f64>,
}

/// One experiment per `k` in `config.sweep_k`, each under `out_dir/k_<k>`, and a
/// combined `summary.csv` with the fitted log-log slope.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepSummary> {
    if config.sweep_k.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value in sweep.k".into()));
    }
    let mdp = config.source.load()?;
    let mut points = Vec::with_capacity(config.sweep_k.len());
    for &k in &config.sweep_k {
        let mut cfg = config.clone();
        cfg.spmd.k = k;
        points.push(run_replications(&mdp, &cfg, &config.out_dir.join(format!("k_{k}")))?);
    }
    let ks: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let gaps: Vec<f64> = points.iter().map(|p| p.mean_best_gap).collect();
    let slope = loglog_slope(&ks, &gaps).ok();
    let mut out = format!("{},slope\n", Summary::HEADER);
    for p in &points {
        writeln!(out, "{},{}", p.csv_row(), slope.map_or(String::new(), |s| s.to_string())).unwrap();
    }
    fs::write(config.out_dir.join("summary.csv"), out)?;
    Ok(SweepSummary { points, slope })
}
