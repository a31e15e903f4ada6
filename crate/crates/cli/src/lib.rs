//! Command-line driver for the GradSAE experiments.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use gradsae::Result;

#[derive(Parser, Debug)]
#[command(name = "gradsae", version, about = "Gradient-based SAE latent influence on a toy QA language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate the synthetic QA corpus.
    GenData,
    /// Train the LM and one SAE per hook layer.
    Train,
    /// Mask selected latents and measure answer quality.
    Perturb,
    /// Inject another question's latents and measure answer change.
    Steer,
    /// Overlap statistics and influence dumps.
    Stats,
    /// Every stage in order.
    All,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hook layer used by perturb, steer and stats.
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// Comma-separated K grid, e.g. `1,10,half`.
    #[arg(long, global = true)]
    pub k: Option<String>,
    /// Comma-separated methods: `gradsae`, `baseline`.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(l) = self.layer {
            cfg.set("layer", &l.to_string())?;
        }
        if let Some(k) = &self.k {
            cfg.set("k_grid", k)?;
        }
        if let Some(m) = &self.method {
            cfg.set("methods", m)?;
        }
        if let Some(o) = &self.out {
            cfg.set("out_dir", &o.to_string_lossy())?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| gradsae::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<pipeline::Outcome> {
    pipeline::with_pool(cfg, || match command {
        Command::GenData => pipeline::gen_data(cfg),
        Command::Train => pipeline::train(cfg),
        Command::Perturb => pipeline::perturb(cfg),
        Command::Steer => pipeline::steer(cfg),
        Command::Stats => pipeline::stats(cfg),
        Command::All => pipeline::run_all(cfg),
    })
}
