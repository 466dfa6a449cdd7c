//! Mini-batch training of an [`RpmModel`] against MSE with Adam.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::rpm::{classify, GradientMethod, RpmGradient, RpmModel};
use crate::shots::{rpm_eval_shots, rpm_gradient_shots, ShotConfig};

const TAG_AUGMENT: u64 = 0xa0;
const TAG_SHUFFLE: u64 = 0xa1;
const TAG_SHOTS_TRAIN: u64 = 0xa2;
const TAG_SHOTS_EVAL: u64 = 0xa3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSet {
    pub theta: bool,
    pub zeta: bool,
    pub lambda: bool,
}

impl FromStr for FreezeSet {
    type Err = Error;

    /// Comma-separated subset of `theta,zeta,lambda`; empty means none.
    fn from_str(s: &str) -> Result<Self> {
        let mut f = FreezeSet::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "theta" => f.theta = true,
                "zeta" => f.zeta = true,
                "lambda" => f.lambda = true,
                other => return Err(Error::Config(format!("cannot freeze `{other}`"))),
            }
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(rename = "L")]
    pub l: usize,
    pub freeze: FreezeSet,
    pub task: Task,
    /// One augmented copy of every training sample per epoch when set.
    pub augment: Option<AugmentConfig>,
    /// Shot-noise estimation of losses and gradients when set.
    pub shots: Option<ShotConfig>,
    pub gradient: GradientMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            l: 1,
            freeze: FreezeSet::default(),
            task: Task::Regression,
            augment: None,
            shots: None,
            gradient: GradientMethod::Adjoint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(s) = &self.shots {
            s.validate()?;
        }
        Ok(())
    }
}

/// Trainable parameters grouped as the optimiser sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroups {
    pub theta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ParamGroups {
    pub fn of(model: &RpmModel) -> Self {
        Self {
            theta: model.theta().to_vec(),
            zeta: model.zeta().iter().flatten().copied().collect(),
            lambda: model.lambda().iter().map(|l| l.re).collect(),
        }
    }

    pub fn from_gradient(g: &RpmGradient) -> Self {
        Self {
            theta: g.theta.clone(),
            zeta: g.zeta.iter().flatten().copied().collect(),
            lambda: g.lambda.clone(),
        }
    }

    pub fn zeros_like(other: &ParamGroups) -> Self {
        Self {
            theta: vec![0.0; other.theta.len()],
            zeta: vec![0.0; other.zeta.len()],
            lambda: vec![0.0; other.lambda.len()],
        }
    }

    /// Writes the groups back into `model` (λ imaginary parts are kept).
    pub fn store(&self, model: &mut RpmModel) -> Result<()> {
        model.set_theta(self.theta.clone())?;
        let cols = 2 * model.n_cuts();
        let rows = if cols == 0 {
            vec![Vec::new(); model.l()]
        } else {
            self.zeta.chunks(cols).map(<[f64]>::to_vec).collect()
        };
        model.set_zeta(rows)?;
        if self.lambda.len() != model.l() {
            return Err(Error::Shape("lambda group length differs from L".into()));
        }
        model.update_lambda_real(|i, _| self.lambda[i]);
        Ok(())
    }

    fn shapes(&self) -> [usize; 3] {
        [self.theta.len(), self.zeta.len(), self.lambda.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamGroups,
    pub v: ParamGroups,
}

impl AdamState {
    pub fn new(params: &ParamGroups) -> Self {
        Self {
            t: 0,
            m: ParamGroups::zeros_like(params),
            v: ParamGroups::zeros_like(params),
        }
    }
}

/// One Adam update with bias correction; frozen groups are left as they are.
pub fn adam_step(
    params: &mut ParamGroups,
    grads: &ParamGroups,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(Error::Shape(format!(
            "parameters {:?}, gradients {:?}, optimiser state {:?}",
            params.shapes(),
            grads.shapes(),
            state.m.shapes()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let groups = [
        (&mut params.theta, &grads.theta, &mut state.m.theta, &mut state.v.theta, cfg.freeze.theta),
        (&mut params.zeta, &grads.zeta, &mut state.m.zeta, &mut state.v.zeta, cfg.freeze.zeta),
        (&mut params.lambda, &grads.lambda, &mut state.m.lambda, &mut state.v.lambda, cfg.freeze.lambda),
    ];
    for (p, g, m, v, frozen) in groups {
        if frozen {
            continue;
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("empty prediction set".into()));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Fraction of predictions whose thresholded label equals the target.
pub fn accuracy(predictions: &[f64], targets: &[f64]) -> f64 {
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| f64::from(classify(**p)) == **t)
        .count();
    hits as f64 / predictions.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub accuracy: Option<f64>,
    /// Mean `|Im f|` discarded when taking the real part.
    pub mean_abs_imag: f64,
}

/// Metrics from precomputed predictions.
pub fn metrics_from(predictions: &[f64], targets: &[f64], task: Task) -> Result<Metrics> {
    Ok(Metrics {
        mse: mse_loss(predictions, targets)?,
        accuracy: (task == Task::Classification).then(|| accuracy(predictions, targets)),
        mean_abs_imag: 0.0,
    })
}

/// MSE (and accuracy for classification) of `model` on `dataset`.
pub fn evaluate(model: &RpmModel, dataset: &Dataset, task: Task) -> Result<Metrics> {
    evaluate_with(model, dataset, task, None)
}

/// As [`evaluate`], with shot-noise estimates when `shots` is given.
pub fn evaluate_with(
    model: &RpmModel,
    dataset: &Dataset,
    task: Task,
    shots: Option<&ShotConfig>,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let values = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| match shots {
            Some(cfg) if !cfg.is_exact() => {
                let seed = rng::derive_seed(cfg.seed, &[TAG_SHOTS_EVAL, i as u64]);
                rpm_eval_shots(model, &s.features, &cfg.with_seed(seed)).map(|e| e.value)
            }
            _ => model.eval(&s.features),
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<f64> = values.iter().map(|v| v.re).collect();
    let mut m = metrics_from(&preds, &dataset.labels(), task)?;
    m.mean_abs_imag = values.iter().map(|v| v.im.abs()).sum::<f64>() / values.len() as f64;
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub initial_train_mse: f64,
    pub initial_val_mse: f64,
    pub initial_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    /// `epoch,train_mse,val_mse,accuracy`; accuracy is blank for regression.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,accuracy\n");
        for r in &self.records {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_mse, r.val_mse, acc);
        }
        out
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn check_dataset(ds: &Dataset, model: &RpmModel, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    if ds.feature_dim != model.n_data() {
        return Err(Error::Data(format!(
            "{what} set has {} features, model expects {}",
            ds.feature_dim,
            model.n_data()
        )));
    }
    Ok(())
}

/// Gradient of the batch MSE and the batch's predictions.
fn batch_gradient(
    model: &RpmModel,
    batch: &[&Sample],
    cfg: &TrainConfig,
    shot_key: [u64; 2],
) -> Result<RpmGradient> {
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(j, s)| match &cfg.shots {
            Some(sc) if !sc.is_exact() => {
                let seed = rng::derive_seed(sc.seed, &[TAG_SHOTS_TRAIN, shot_key[0], shot_key[1], j as u64]);
                rpm_gradient_shots(model, &s.features, 1.0, &sc.with_seed(seed))
            }
            _ => model.gradient_with_value(&s.features, 1.0, cfg.gradient),
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 2.0 / batch.len() as f64;
    let mut total = RpmGradient::zeros(model.theta().len(), model.l(), 2 * model.n_cuts());
    for ((g, value), s) in per_sample.iter().zip(batch) {
        total.add_scaled(g, scale * (value.re - s.label));
    }
    Ok(total)
}

/// Trains `model` in place.
pub fn train(model: &mut RpmModel, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(train_set, model, "training")?;
    check_dataset(val_set, model, "validation")?;
    let start = Instant::now();
    let shots = cfg.shots.as_ref();
    let init_train = evaluate_with(model, train_set, cfg.task, shots)?;
    let init_val = evaluate_with(model, val_set, cfg.task, shots)?;
    log::info!(
        "L={} initial train mse {:.5}, val mse {:.5}",
        model.l(),
        init_train.mse,
        init_val.mse
    );

    let mut params = ParamGroups::of(model);
    let mut adam = AdamState::new(&params);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut pool: Vec<Sample> = train_set.samples.clone();
        if let Some(aug) = &cfg.augment {
            for (i, s) in train_set.samples.iter().enumerate() {
                let mut r = rng::stream(cfg.seed, &[TAG_AUGMENT, epoch as u64, i as u64]);
                pool.push(augment(s, &mut r, aug));
            }
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &pool[i]).collect();
            let g = batch_gradient(model, &batch, cfg, [epoch as u64, step as u64])?;
            adam_step(&mut params, &ParamGroups::from_gradient(&g), &mut adam, cfg)?;
            params.store(model)?;
        }
        let tr = evaluate_with(model, train_set, cfg.task, shots)?;
        let va = evaluate_with(model, val_set, cfg.task, shots)?;
        log::info!(
            "L={} epoch {epoch}: train mse {:.5}, val mse {:.5}{}, discarded |Im| {:.2e}",
            model.l(),
            tr.mse,
            va.mse,
            va.accuracy.map(|a| format!(", accuracy {:.4}", a)).unwrap_or_default(),
            va.mean_abs_imag
        );
        records.push(EpochRecord {
            epoch,
            train_mse: tr.mse,
            val_mse: va.mse,
            accuracy: va.accuracy,
        });
    }
    Ok(TrainReport {
        records,
        initial_train_mse: init_train.mse,
        initial_val_mse: init_val.mse,
        initial_accuracy: init_val.accuracy,
        wall_time_s: start.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}
