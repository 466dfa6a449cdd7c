//! Command-line front end of the `rpm` binary.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::circuit::Topology;
use crate::data::gen_synthetic;
use crate::error::{Error, Result};
use crate::experiments::{budget, run_dir, run_experiment, spectrum, write_synthetic, RunConfig, SynthMode};
use crate::rpm::GradientMethod;
use crate::train::FreezeSet;
use crate::verify::{run_verify, VerifyConfig};

#[derive(Debug, Parser)]
#[command(name = "rpm", version, about = "Reduced partition models of cut quantum circuits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the exactness, gradient, spectrum and shot-bound self-checks.
    Verify(VerifyArgs),
    /// Train on MNIST 3 vs 6 with the 64-qubit, 8-block model.
    TrainMnist(RunArgs),
    /// Train on data labelled by a random generator circuit.
    TrainSynthetic(RunArgs),
    /// Write a synthetic dataset and its generator parameters.
    GenSynthetic(RunArgs),
    /// Fit the trigonometric spectrum of a random model along one feature.
    Spectrum(SpectrumArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force this many cuts in the recombination circuits.
    #[arg(long)]
    pub budget_r: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub circuits: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt a CZ coefficient (checks that the suite can fail).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON file with any RunConfig fields; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated list of term counts.
    #[arg(long = "L", value_delimiter = ',')]
    pub l: Option<Vec<usize>>,
    #[arg(long)]
    pub n_qubits: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub topology: Option<TopologyArg>,
    /// Number of contiguous blocks K.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Shots per inner product estimate (exact simulation when absent).
    #[arg(long)]
    pub shots: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Model seed; repeat r uses seed + r. For gen-synthetic, the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated subset of theta,zeta,lambda.
    #[arg(long)]
    pub freeze: Option<FreezeSet>,
    #[arg(long)]
    pub mode: Option<SynthMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub gradient: Option<GradientArg>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Synthetic dataset CSV from gen-synthetic.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Write the parent circuit in text form and continue.
    #[arg(long)]
    pub dump_circuit: Option<PathBuf>,
    /// Print the evaluation budget and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0)]
    pub feature: usize,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum TopologyArg {
    Line,
    Ring,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum GradientArg {
    Adjoint,
    ParameterShift,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl RunArgs {
    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self, subcommand: &str) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(subcommand, p)?,
            None => RunConfig::default_for(subcommand)?,
        };
        if let Some(v) = &self.l {
            c.l_values = v.clone();
        }
        let blocks_or_size_changed = self.n_qubits.is_some() || self.blocks.is_some();
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {$(
                if let Some(v) = self.$flag.clone() {
                    c.$field = v.into();
                }
            )*};
        }
        set!(n_qubits <- n_qubits, depth <- depth, blocks <- blocks, epsilon <- epsilon, delta <- delta,
             repeats <- repeats, freeze <- freeze, epochs <- epochs, batch_size <- batch_size,
             learning_rate <- lr, n_train <- n_train, n_val <- n_val, data_seed <- data_seed);
        if subcommand == "gen-synthetic" {
            set!(data_seed <- seed);
        } else {
            set!(seed <- seed);
        }
        if let Some(t) = self.topology {
            c.topology = match t {
                TopologyArg::Line => Topology::Line,
                TopologyArg::Ring => Topology::Ring,
            };
        }
        if let Some(g) = self.gradient {
            c.gradient = match g {
                GradientArg::Adjoint => GradientMethod::Adjoint,
                GradientArg::ParameterShift => GradientMethod::ParameterShift,
            };
        }
        if self.shots.is_some() {
            c.shots = self.shots;
        }
        if self.mode.is_some() {
            c.mode = self.mode;
        }
        if self.no_augment {
            c.augment = None;
        }
        if let Some(o) = path_str(&self.out) {
            c.out = o;
        }
        for (dst, src) in [
            (&mut c.images, &self.images),
            (&mut c.labels, &self.labels),
            (&mut c.dataset, &self.dataset),
        ] {
            if src.is_some() {
                *dst = path_str(src);
            }
        }
        if subcommand == "train-mnist" && blocks_or_size_changed {
            // observable follows the block layout
            let size = c.n_qubits / c.blocks.max(1);
            c.observable_qubits = (0..c.blocks).map(|b| b * size).collect();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Maps errors to exit codes: 2 for configuration and budget problems,
/// 1 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Budget { .. } => 2,
        _ => 1,
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let cfg = VerifyConfig {
        seed: a.seed,
        n_circuits: a.circuits,
        budget_r: a.budget_r,
        inject_fault: a.inject_fault,
        ..VerifyConfig::default()
    };
    let report = run_verify(&cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &a.out {
        fs::write(p, &json)?;
    }
    for s in &report.suites {
        eprintln!(
            "{} {:<14} worst {:.3e} (tolerance {:.1e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.worst_error,
            s.tolerance
        );
    }
    Ok(report.passed)
}

fn cmd_train(a: &RunArgs, subcommand: &str) -> Result<bool> {
    let cfg = a.resolve(subcommand)?;
    if let Some(p) = &a.dump_circuit {
        fs::write(p, cfg.model(1)?.parent().to_text())?;
        eprintln!("circuit written to {}", p.display());
    }
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        for &l in &cfg.l_values {
            let b = budget(&cfg, l)?;
            println!(
                "L={l}: {} cuts; {} block simulations ({}-qubit) per evaluation; \
                 exact expansion needs {} terms over {} distinct subcircuits",
                b.cuts, b.block_simulations_per_eval, b.block_qubits, b.exact_terms, b.exact_subcircuits
            );
        }
        return Ok(true);
    }
    let dir = run_dir(&cfg);
    let exp = run_experiment(&cfg, Some(&dir))?;
    for s in &exp.summary.per_l {
        println!(
            "L={:<4} median val mse {:.5}  train mse {:.5}{}",
            s.l,
            s.median_val_mse,
            s.median_train_mse,
            s.median_accuracy.map(|a| format!("  accuracy {:.4}", a)).unwrap_or_default()
        );
    }
    println!("results in {}", dir.display());
    Ok(true)
}

fn cmd_gen_synthetic(a: &RunArgs) -> Result<bool> {
    let cfg = a.resolve("gen-synthetic")?;
    let ds = gen_synthetic(
        cfg.n_qubits,
        cfg.depth,
        cfg.topology,
        cfg.n_train + cfg.n_val,
        cfg.data_seed,
    )?;
    let dir = run_dir(&RunConfig {
        seed: cfg.data_seed,
        ..cfg.clone()
    });
    let csv = write_synthetic(&ds, &dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!("{}", csv.display());
    Ok(true)
}

fn cmd_spectrum(a: &SpectrumArgs) -> Result<bool> {
    let cfg = a.run.resolve("spectrum")?;
    let (fit, under) = spectrum(&cfg, a.feature, a.grid)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "fit": fit, "underfit": under }))?
    );
    Ok(true)
}

pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::TrainMnist(a) => cmd_train(a, "train-mnist"),
        Command::TrainSynthetic(a) => cmd_train(a, "train-synthetic"),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Spectrum(a) => cmd_spectrum(a),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
