use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqgen::cli::{
    run_analyze_energy, run_analyze_orders, run_decode, run_evaluate, run_oracle_check,
    run_synth_data, run_train_ar, run_train_lm, run_train_policy, RunConfig,
};
use seqgen::Result;

/// Experiment harness for masked-model sequence generation.
#[derive(Parser)]
#[command(name = "seqgen", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual key=value overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                seqgen::Error::Config(format!("--set expects key=value, got {kv:?}"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cipher corpus with train/valid/test splits.
    SynthData(Common),
    /// Train the masked sequence model on the train split.
    TrainLm(Common),
    /// Train the autoregressive rescorer.
    TrainAr(Common),
    /// Train a coordinate-selection policy against the frozen masked model.
    TrainPolicy(Common),
    /// Decode the test split; writes report, traces, and a metrics row.
    Decode(Common),
    /// Recompute corpus metrics from an existing decode report.
    Evaluate(Common),
    /// Cluster generation-order vectors from decoded traces.
    AnalyzeOrders(Common),
    /// Compare per-step energy curves across selection presets.
    AnalyzeEnergy(Common),
    /// Run the tabular oracle equivalence suite.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Inject an off-by-one into beam expansion to prove the suite
        /// detects it (the beam check must then fail).
        #[arg(long)]
        mutate: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData(c) => run_synth_data(&c.resolve()?),
        Cmd::TrainLm(c) => run_train_lm(&c.resolve()?),
        Cmd::TrainAr(c) => run_train_ar(&c.resolve()?),
        Cmd::TrainPolicy(c) => run_train_policy(&c.resolve()?),
        Cmd::Decode(c) => run_decode(&c.resolve()?).map(|_| ()),
        Cmd::Evaluate(c) => run_evaluate(&c.resolve()?).map(|_| ()),
        Cmd::AnalyzeOrders(c) => run_analyze_orders(&c.resolve()?),
        Cmd::AnalyzeEnergy(c) => run_analyze_energy(&c.resolve()?),
        Cmd::OracleCheck { common, mutate } => {
            common.resolve()?;
            run_oracle_check(mutate)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
