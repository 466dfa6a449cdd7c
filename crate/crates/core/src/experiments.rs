//! Experiment runners behind the `train-*`, `gen-synthetic` and `spectrum`
//! subcommands, with the run configuration they echo to disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::circuit::{PartitionSpec, Topology};
use crate::cutter::term_count;
use crate::data::{balanced_split, gen_synthetic, load_mnist_3v6, AugmentConfig, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::rng;
use crate::rpm::{hea_model, GradientMethod, RpmModel, SpectrumReport};
use crate::shots::ShotConfig;
use crate::train::{train, FreezeSet, Task, TrainConfig, TrainReport};

pub const MNIST_IMAGES: &str = "data/mnist-3v6/images-idx3-ubyte";
pub const MNIST_LABELS: &str = "data/mnist-3v6/labels-idx1-ubyte";

const TAG_INIT: u64 = 0x1417;
const TAG_SHOTS: u64 = 0x5407;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    /// θ set to the generator's values and frozen.
    FixedTheta,
    /// θ starts at the generator's values and is trained.
    FreeTheta,
    /// Every group initialised at random and trained.
    RandomInit,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}` (fixed-theta, free-theta, random-init)")))
    }
}

/// Everything a training run consumes. Written as `config.json`; loading it
/// back and running again reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    pub n_qubits: usize,
    pub depth: usize,
    pub topology: Topology,
    /// Number of contiguous blocks K.
    pub blocks: usize,
    /// Qubits carrying a Z factor in the observable.
    pub observable_qubits: Vec<usize>,
    #[serde(rename = "L")]
    pub l_values: Vec<usize>,
    pub seed: u64,
    pub repeats: usize,
    /// Seed of the dataset generator and of the train/validation split.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub mode: Option<SynthMode>,
    pub freeze: FreezeSet,
    pub task: Task,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: Option<AugmentConfig>,
    pub gradient: GradientMethod,
    /// Shots per inner product; absent means exact simulation.
    pub shots: Option<u64>,
    pub epsilon: f64,
    pub delta: f64,
    pub images: Option<String>,
    pub labels: Option<String>,
    /// Synthetic dataset CSV written by `gen-synthetic`.
    pub dataset: Option<String>,
    pub out: String,
}

impl RunConfig {
    fn base(subcommand: &str) -> Self {
        let t = TrainConfig::default();
        Self {
            subcommand: subcommand.into(),
            n_qubits: 10,
            depth: 3,
            topology: Topology::Ring,
            blocks: 2,
            observable_qubits: vec![0],
            l_values: vec![40],
            seed: 0,
            repeats: 1,
            data_seed: 0,
            n_train: 2000,
            n_val: 500,
            mode: Some(SynthMode::FixedTheta),
            freeze: FreezeSet::default(),
            task: Task::Regression,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            batch_size: t.batch_size,
            epochs: t.epochs,
            augment: None,
            gradient: t.gradient,
            shots: None,
            epsilon: 0.1,
            delta: 0.05,
            images: None,
            labels: None,
            dataset: None,
            out: "runs".into(),
        }
    }

    /// 64 qubits, depth 3, line topology, 8 blocks of 8, `Z` on the first
    /// qubit of every block, 1000/500 balanced split with augmentation.
    pub fn mnist() -> Self {
        Self {
            n_qubits: 64,
            topology: Topology::Line,
            blocks: 8,
            observable_qubits: (0..8).map(|b| 8 * b).collect(),
            l_values: vec![5],
            n_train: 1000,
            n_val: 500,
            mode: None,
            task: Task::Classification,
            augment: Some(AugmentConfig::default()),
            images: Some(MNIST_IMAGES.into()),
            labels: Some(MNIST_LABELS.into()),
            ..Self::base("train-mnist")
        }
    }

    /// 10-qubit depth-3 ring generator split into two blocks of five.
    pub fn synthetic() -> Self {
        Self::base("train-synthetic")
    }

    pub fn gen_synthetic() -> Self {
        Self {
            mode: None,
            ..Self::base("gen-synthetic")
        }
    }

    pub fn spectrum() -> Self {
        Self {
            l_values: vec![3],
            n_qubits: 4,
            depth: 2,
            topology: Topology::Line,
            mode: None,
            ..Self::base("spectrum")
        }
    }

    pub fn default_for(subcommand: &str) -> Result<Self> {
        match subcommand {
            "train-mnist" => Ok(Self::mnist()),
            "train-synthetic" => Ok(Self::synthetic()),
            "gen-synthetic" => Ok(Self::gen_synthetic()),
            "spectrum" => Ok(Self::spectrum()),
            other => Err(Error::Config(format!("no run configuration for `{other}`"))),
        }
    }

    /// Defaults for `subcommand` overlaid with the fields present in `json`.
    pub fn from_json_over_defaults(subcommand: &str, json: &str) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default_for(subcommand)?)?;
        let patch: Value = serde_json::from_str(json)?;
        let Value::Object(patch) = patch else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        if let Some(sub) = patch.get("subcommand") {
            if sub != subcommand {
                return Err(Error::Config(format!("config file is for {sub}, not {subcommand}")));
            }
        }
        if let Value::Object(b) = &mut base {
            b.extend(patch);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(subcommand: &str, path: &Path) -> Result<Self> {
        Self::from_json_over_defaults(subcommand, &fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_values.is_empty() || self.l_values.contains(&0) {
            return Err(Error::Config("L values must be a non-empty list of positive integers".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.blocks == 0 || self.n_qubits % self.blocks != 0 {
            return Err(Error::Config(format!(
                "{} qubits cannot be split into {} equal blocks",
                self.n_qubits, self.blocks
            )));
        }
        if let Some(&q) = self.observable_qubits.iter().find(|&&q| q >= self.n_qubits) {
            return Err(Error::Config(format!("observable qubit {q} out of range")));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("train and validation sets must be non-empty".into()));
        }
        self.train_config(1, 0).validate()
    }

    /// Effective freeze set, including the one implied by the mode.
    pub fn effective_freeze(&self) -> FreezeSet {
        let mut f = self.freeze;
        if self.mode == Some(SynthMode::FixedTheta) {
            f.theta = true;
        }
        f
    }

    pub fn train_config(&self, l: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_adam: self.eps_adam,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            l,
            freeze: self.effective_freeze(),
            task: self.task,
            augment: self.augment,
            shots: self.shots.map(|m| ShotConfig {
                m,
                epsilon: self.epsilon,
                delta: self.delta,
                seed: rng::derive_seed(seed, &[TAG_SHOTS]),
                certify: false,
            }),
            gradient: self.gradient,
        }
    }

    pub fn partition(&self) -> Result<PartitionSpec> {
        PartitionSpec::contiguous(self.n_qubits, self.blocks)
    }

    pub fn model(&self, l: usize) -> Result<RpmModel> {
        hea_model(
            self.n_qubits,
            self.depth,
            self.topology,
            &self.partition()?,
            &self.observable_qubits,
            l,
        )
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed + r).collect()
    }
}

/// Cost figures printed by `--dry-run`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Budget {
    pub n_qubits: usize,
    pub blocks: usize,
    pub block_qubits: usize,
    pub cuts: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Block state preparations per model evaluation (ket and bra per block and term).
    pub block_simulations_per_eval: usize,
    /// Terms of the exact cut expansion, `4^r`.
    pub exact_terms: u128,
    /// Distinct block subcircuits of the exact expansion, `6^r`.
    pub exact_subcircuits: u128,
}

pub fn budget(cfg: &RunConfig, l: usize) -> Result<Budget> {
    let model = cfg.model(l)?;
    let r = model.n_cuts();
    Ok(Budget {
        n_qubits: cfg.n_qubits,
        blocks: cfg.blocks,
        block_qubits: cfg.n_qubits / cfg.blocks,
        cuts: r,
        l,
        block_simulations_per_eval: 2 * cfg.blocks * l,
        exact_terms: term_count(r, 2),
        exact_subcircuits: 6u128.checked_pow(r as u32).unwrap_or(u128::MAX),
    })
}

/// Train/validation data for a run configuration.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.subcommand.as_str() {
        "train-mnist" => {
            let images = cfg.images.as_deref().unwrap_or(MNIST_IMAGES);
            let labels = cfg.labels.as_deref().unwrap_or(MNIST_LABELS);
            let ds = load_mnist_3v6(Path::new(images), Path::new(labels))?;
            balanced_split(&ds, cfg.n_train, cfg.n_val, cfg.data_seed)
        }
        _ => {
            let ds = match &cfg.dataset {
                Some(path) => read_synthetic(Path::new(path))?,
                None => gen_synthetic(
                    cfg.n_qubits,
                    cfg.depth,
                    cfg.topology,
                    cfg.n_train + cfg.n_val,
                    cfg.data_seed,
                )?,
            };
            if ds.len() < cfg.n_train + cfg.n_val {
                return Err(Error::Data(format!(
                    "dataset has {} samples, split needs {}",
                    ds.len(),
                    cfg.n_train + cfg.n_val
                )));
            }
            let train: Vec<usize> = (0..cfg.n_train).collect();
            let val: Vec<usize> = (cfg.n_train..cfg.n_train + cfg.n_val).collect();
            Ok((ds.select(&train), ds.select(&val)))
        }
    }
}

/// Reads a dataset CSV and, when present, the `provenance.json` beside it.
pub fn read_synthetic(path: &Path) -> Result<Dataset> {
    let mut ds = Dataset::read_csv(path)?;
    let prov = path.with_file_name("provenance.json");
    if prov.exists() {
        ds.provenance = serde_json::from_str(&fs::read_to_string(prov)?)?;
    }
    Ok(ds)
}

/// Writes `dataset.csv` and `provenance.json` into `dir`.
pub fn write_synthetic(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let csv = dir.join("dataset.csv");
    ds.write_csv(&csv)?;
    fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&ds.provenance)?)?;
    Ok(csv)
}

/// Model for one run, initialised according to the task and mode.
pub fn initial_model(cfg: &RunConfig, l: usize, seed: u64, train_set: &Dataset) -> Result<RpmModel> {
    let mut model = cfg.model(l)?;
    model.init_random(&mut rng::stream(seed, &[TAG_INIT]));
    if matches!(cfg.mode, Some(SynthMode::FixedTheta | SynthMode::FreeTheta)) {
        let Provenance::Synthetic {
            theta_star,
            n_qubits,
            depth,
            topology,
            ..
        } = &train_set.provenance
        else {
            return Err(Error::Config(
                "this mode needs the generator parameters; pass a dataset with its provenance.json".into(),
            ));
        };
        if (*n_qubits, *depth, *topology) != (cfg.n_qubits, cfg.depth, cfg.topology) {
            return Err(Error::Config(format!(
                "dataset was generated by a {n_qubits}-qubit depth-{depth} {topology:?} circuit"
            )));
        }
        model.set_theta(theta_star.clone())?;
    }
    Ok(model)
}

/// Outcome of a single (L, seed) run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub l: usize,
    pub seed: u64,
    pub report: TrainReport,
    pub model: RpmModel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    pub epochs: usize,
    pub initial_val_mse: f64,
    pub final_train_mse: f64,
    pub final_val_mse: f64,
    pub final_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

impl RunOutcome {
    pub fn summary(&self) -> RunSummary {
        let last = self.report.final_record();
        RunSummary {
            l: self.l,
            seed: self.seed,
            epochs: self.report.records.len(),
            initial_val_mse: self.report.initial_val_mse,
            final_train_mse: last.map_or(self.report.initial_train_mse, |r| r.train_mse),
            final_val_mse: last.map_or(self.report.initial_val_mse, |r| r.val_mse),
            final_accuracy: last.map_or(self.report.initial_accuracy, |r| r.accuracy),
            wall_time_s: self.report.wall_time_s,
        }
    }
}

/// Median over the seeds of one L.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LSummary {
    #[serde(rename = "L")]
    pub l: usize,
    pub seeds: Vec<u64>,
    pub median_train_mse: f64,
    pub median_val_mse: f64,
    pub median_accuracy: Option<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub subcommand: String,
    pub mode: Option<SynthMode>,
    pub per_l: Vec<LSummary>,
}

impl ExperimentSummary {
    pub fn for_l(&self, l: usize) -> Option<&LSummary> {
        self.per_l.iter().find(|s| s.l == l)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn summarize(cfg: &RunConfig, runs: &[RunSummary]) -> ExperimentSummary {
    let per_l = cfg
        .l_values
        .iter()
        .map(|&l| {
            let rs: Vec<RunSummary> = runs.iter().filter(|r| r.l == l).cloned().collect();
            let col = |f: fn(&RunSummary) -> f64| median(&rs.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
            let acc: Vec<f64> = rs.iter().filter_map(|r| r.final_accuracy).collect();
            LSummary {
                l,
                seeds: rs.iter().map(|r| r.seed).collect(),
                median_train_mse: col(|r| r.final_train_mse),
                median_val_mse: col(|r| r.final_val_mse),
                median_accuracy: median(&acc),
                runs: rs,
            }
        })
        .collect();
    ExperimentSummary {
        subcommand: cfg.subcommand.clone(),
        mode: cfg.mode,
        per_l,
    }
}

/// `<out>/<subcommand>/<timestamp>-<seed>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    Path::new(&cfg.out).join(&cfg.subcommand).join(format!("{stamp}-{}", cfg.seed))
}

pub fn run_subdir(l: usize, seed: u64) -> String {
    format!("L{l}-s{seed}")
}

/// Result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub summary: ExperimentSummary,
    pub runs: Vec<RunOutcome>,
}

/// Trains every (L, seed) pair of `cfg`. With `dir` set, writes
/// `config.json` and `summary.json` there and `curve.csv`, `summary.json`
/// and `model.json` into one subdirectory per run.
pub fn run_experiment(cfg: &RunConfig, dir: Option<&Path>) -> Result<Experiment> {
    cfg.validate()?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let (train_set, val_set) = load_data(cfg)?;
    let mut runs = Vec::new();
    for &l in &cfg.l_values {
        for seed in cfg.seeds() {
            let mut model = initial_model(cfg, l, seed, &train_set)?;
            log::info!("{}: L={l}, seed {seed}", cfg.subcommand);
            let mut report = train(&mut model, &train_set, &val_set, &cfg.train_config(l, seed))?;
            if let Some(d) = dir {
                let sub = d.join(run_subdir(l, seed));
                fs::create_dir_all(&sub)?;
                let ckpt = sub.join("model.json");
                model.save(&ckpt)?;
                report.checkpoint = Some(ckpt.display().to_string());
                fs::write(sub.join("curve.csv"), report.to_csv())?;
            }
            let outcome = RunOutcome { l, seed, report, model };
            if let Some(d) = dir {
                let sub = d.join(run_subdir(l, seed));
                fs::write(sub.join("summary.json"), serde_json::to_string_pretty(&outcome.summary())?)?;
            }
            runs.push(outcome);
        }
    }
    let summary = summarize(cfg, &runs.iter().map(RunOutcome::summary).collect::<Vec<_>>());
    if let Some(d) = dir {
        fs::write(d.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(Experiment { summary, runs })
}

/// Fits the trigonometric spectrum of a randomly initialised model along
/// `feature`, once with as many frequencies as encoding gates and once with
/// one fewer.
pub fn spectrum(cfg: &RunConfig, feature: usize, grid: usize) -> Result<(SpectrumReport, SpectrumReport)> {
    cfg.validate()?;
    let l = cfg.l_values[0];
    let mut model = cfg.model(l)?;
    let mut r = rng::stream(cfg.seed, &[TAG_INIT]);
    model.init_random(&mut r);
    let lambda: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
    model.set_lambda_real(&lambda)?;
    let base: Vec<f64> = (0..model.n_data()).map(|_| r.random_range(0.0..1.0)).collect();
    let degree = model.encoding_count(feature);
    let fit = model.spectrum_check(&base, feature, degree, grid)?;
    let under = model.spectrum_check(&base, feature, degree.saturating_sub(1), grid)?;
    Ok((fit, under))
}
