use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use spmd::harness::{self, ExperimentConfig, GeneratorSpec};
use spmd::mdp::{self, Mdp};

#[derive(Parser)]
#[command(name = "spmd", version, about = "Stochastic policy mirror descent on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random ergodic MDP and write it to a file.
    Gen {
        #[arg(long, default_value_t = 10)]
        n_states: usize,
        #[arg(long, default_value_t = 5)]
        n_actions: usize,
        #[arg(long, default_value_t = 3)]
        branching: usize,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        cost_seed: u64,
        #[arg(long, default_value_t = 1)]
        kernel_seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Solve an MDP exactly and print V*, Q* and the near-optimal action sets.
    Solve {
        mdp: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Run replicated SPMD experiments.
    Run(ExperimentArgs),
    /// Run experiments over several iteration budgets and fit the log-log slope.
    Sweep(ExperimentArgs),
}

/// Flags mirror the config keys; a config file wins on conflict.
#[derive(Args)]
struct ExperimentArgs {
    /// Flat key=value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long = "mdp-file")]
    mdp_file: Option<PathBuf>,
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long)]
    evaluator: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated iteration budgets for `sweep`.
    #[arg(long = "sweep-k")]
    sweep_k: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps_target: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_traj_len: Option<usize>,
    /// Extra `key=value` entries, e.g. `gen.n_states=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExperimentArgs {
    fn flag_map(&self) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        put("mdp.file", self.mdp_file.as_ref().map(|p| p.display().to_string()));
        put("divergence", self.divergence.clone());
        put("evaluator", self.evaluator.clone());
        put("k", self.k.map(|v| v.to_string()));
        put("sweep.k", self.sweep_k.clone());
        put("delta", self.delta.map(|v| v.to_string()));
        put("eps_target", self.eps_target.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("replications", self.replications.map(|v| v.to_string()));
        put("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        put("eta", self.eta.map(|v| v.to_string()));
        put("n", self.n.map(|v| v.to_string()));
        put("m", self.m.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("max_traj_len", self.max_traj_len.map(|v| v.to_string()));
        for entry in &self.set {
            let (k, v) = entry.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{entry}`"))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let flags = self.flag_map()?;
        let merged = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                harness::merge_config(harness::parse_config(&text)?, flags)
            }
            None => flags,
        };
        Ok(ExperimentConfig::from_map(&merged)?)
    }
}

fn solve(path: &PathBuf, tol: f64) -> Result<()> {
    let mdp = Mdp::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (v, q) = mdp::optimal_values(&mdp, tol)?;
    println!("s,v_star");
    for (s, x) in v.iter().enumerate() {
        println!("{s},{x}");
    }
    print!("{}", q.to_csv());
    println!("s,optimal_actions");
    for (s, set) in mdp::optimal_action_sets(&q, 1e-8).iter().enumerate() {
        let list: Vec<String> = set.iter().map(usize::to_string).collect();
        println!("{s},{}", list.join(" "));
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { n_states, n_actions, branching, lambda, gamma, cost_seed, kernel_seed, out } => {
            let mut spec = GeneratorSpec::new(n_states, n_actions, branching, lambda, cost_seed, kernel_seed);
            spec.gamma = gamma;
            harness::generate_mdp(&spec)?.save(&out)?;
            info!("wrote {}", out.display());
        }
        Command::Solve { mdp, tol } => solve(&mdp, tol)?,
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let s = harness::run_experiment(&cfg)?;
            println!("{}\n{}", harness::Summary::HEADER, s.csv_row());
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let sweep = harness::run_sweep(&cfg)?;
            println!("{}", harness::Summary::HEADER);
            for p in &sweep.points {
                println!("{}", p.csv_row());
            }
            match sweep.slope {
                Some(slope) => println!("slope,{slope}"),
                None => println!("slope,"),
            }
        }
    }
    Ok(())
}
