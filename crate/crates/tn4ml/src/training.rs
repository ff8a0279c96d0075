//! Training strategies: batched gradient descent over all site tensors, and
//! DMRG-style two-site sweeping with SVD bond truncation.

use std::collections::HashMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddedState;
use crate::objective::{
    batch_gradient_slots, gradient_engine, loss_value, model_output, LossError, LossSpec, Output,
    Targets,
};
use crate::tensor::{contract, frobenius_norm, svd_with_bond_label, DenseTensor};
use crate::tt::{self, TensorTrain, TtError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),

    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),

    #[error(transparent)]
    Tt(#[from] TtError),

    #[error("bad training configuration: {0}")]
    BadConfig(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("svd split failed at bond {bond}: {source}")]
    Split {
        bond: usize,
        source: crate::tensor::TensorError,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GradientDescent,
    Sweeping,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerKind {
    fn lr(&self) -> f64 {
        match self {
            OptimizerKind::Sgd { lr } => *lr,
            OptimizerKind::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub normalize_after_update: bool,
    #[serde(default)]
    pub canonical_center: Option<usize>,
    #[serde(default)]
    pub max_bond: Option<usize>,
    #[serde(default)]
    pub svd_cutoff: Option<f64>,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr() < 0.0 {
            return Err(TrainError::BadConfig("learning rate must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.strategy == Strategy::Sweeping {
            match self.max_bond {
                Some(b) if b >= 1 => {}
                _ => {
                    return Err(TrainError::BadConfig(
                        "sweeping needs max_bond >= 1".into(),
                    ))
                }
            }
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(TrainError::BadConfig("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub epoch_seconds: f64,
    pub throughput: f64,
    pub max_bond_dim: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with columns `epoch,train_loss,val_loss,epoch_seconds,throughput`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,epoch_seconds,throughput\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, val, e.epoch_seconds, e.throughput
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Training inputs: embedded samples plus optional supervision and a
/// validation split.
pub struct TrainData<'a> {
    pub train: &'a [EmbeddedState],
    pub train_targets: Option<Targets>,
    pub val: Option<&'a [EmbeddedState]>,
    pub val_targets: Option<Targets>,
}

impl<'a> TrainData<'a> {
    pub fn unsupervised(train: &'a [EmbeddedState], val: Option<&'a [EmbeddedState]>) -> Self {
        TrainData {
            train,
            train_targets: None,
            val,
            val_targets: None,
        }
    }
}

fn subset_targets(targets: &Targets, idx: &[usize]) -> Targets {
    match targets {
        Targets::Classes(labels) => {
            Targets::Classes(idx.iter().map(|&i| labels[i]).collect())
        }
        Targets::Values(values) => {
            Targets::Values(idx.iter().map(|&i| values[i].clone()).collect())
        }
    }
}

fn gather_batch(states: &[EmbeddedState], idx: &[usize]) -> Vec<EmbeddedState> {
    idx.iter().map(|&i| states[i].clone()).collect()
}

/// Scales gradients in place so their global norm does not exceed `clip`.
fn clip_gradients(grads: &mut [DenseTensor], clip: Option<f64>) {
    let Some(clip) = clip else { return };
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamSlot {
    fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        slots: HashMap<usize, AdamSlot>,
    },
}

impl Optimizer {
    fn new(kind: &OptimizerKind) -> Self {
        match *kind {
            OptimizerKind::Sgd { lr } => Optimizer::Sgd { lr },
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                slots: HashMap::new(),
            },
        }
    }

    /// One update on the tensor stored at state key `slot`.
    fn step(&mut self, slot: usize, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                slots,
            } => {
                slots
                    .entry(slot)
                    .or_default()
                    .step(params, grad, *lr, *beta1, *beta2, *eps);
            }
        }
    }
}

struct Monitored {
    best_value: f64,
    best_model: TensorTrain,
    stale_epochs: usize,
}

fn monitored_value(es: &EarlyStopping, train: f64, val: Option<f64>) -> Result<f64> {
    match es.monitor {
        Monitor::Train => Ok(train),
        Monitor::Validation => val.ok_or_else(|| {
            TrainError::BadConfig("early stopping monitors validation but no split given".into())
        }),
    }
}

/// Batched gradient descent: every site tensor is updated simultaneously from
/// the environment gradients of each batch.
pub fn train_gradient_descent(
    model: &TensorTrain,
    data: &TrainData,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(TensorTrain, TrainLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::BadConfig("empty training set".into()));
    }
    let mut model = model.clone();
    let mut optimizer = Optimizer::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut monitored: Option<Monitored> = None;
    let n = data.train.len();

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_weighted = 0.0;
        let mut samples = 0usize;
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather_batch(data.train, idx);
            let targets = data.train_targets.as_ref().map(|t| subset_targets(t, idx));
            let report = gradient_engine(&model, &batch, targets.as_ref(), loss)?;
            if !report.value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                });
            }
            let mut grads = report.gradients;
            clip_gradients(&mut grads, cfg.grad_clip);
            for (site, grad) in grads.iter().enumerate() {
                optimizer.step(site, model.sites_mut()[site].data_mut(), grad.data());
            }
            if cfg.normalize_after_update {
                model = tt::normalize(&tt::canonicalize(
                    &model,
                    cfg.canonical_center.unwrap_or(0),
                )?)?;
            } else if let Some(center) = cfg.canonical_center {
                model = tt::canonicalize(&model, center)?;
            }
            loss_weighted += report.value * idx.len() as f64;
            samples += idx.len();
        }

        let train_loss = loss_weighted / samples as f64;
        let val_loss = match data.val {
            Some(val) if !val.is_empty() => {
                Some(loss_value(&model, val, data.val_targets.as_ref(), loss)?)
            }
            _ => None,
        };
        let secs = started.elapsed().as_secs_f64();
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            epoch_seconds: secs,
            throughput: samples as f64 / secs.max(1e-12),
            max_bond_dim: model.max_bond_dim(),
        });

        if let Some(es) = &cfg.early_stopping {
            let value = monitored_value(es, train_loss, val_loss)?;
            match &mut monitored {
                None => {
                    monitored = Some(Monitored {
                        best_value: value,
                        best_model: model.clone(),
                        stale_epochs: 0,
                    })
                }
                Some(state) => {
                    if value < state.best_value - es.min_delta {
                        state.best_value = value;
                        state.best_model = model.clone();
                        state.stale_epochs = 0;
                    } else {
                        state.stale_epochs += 1;
                        if state.stale_epochs >= es.patience {
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }

    let final_model = match monitored {
        Some(state) => state.best_model,
        None => model,
    };
    Ok((final_model, log))
}

/// Cycling batch stream with a seeded reshuffle whenever the pass ends.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchStream {
            order,
            cursor: 0,
            batch_size,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Two-site sweeping: at each bond the adjacent sites are merged, updated
/// with one optimizer step on the gradient of the next batch, and split back
/// by a truncated SVD with the singular values absorbed in the sweep
/// direction. One epoch is a full left-to-right then right-to-left pass.
pub fn train_sweeping(
    model: &TensorTrain,
    data: &TrainData,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(TensorTrain, TrainLog)> {
    cfg.validate()?;
    if cfg.strategy != Strategy::Sweeping {
        return Err(TrainError::BadConfig(
            "train_sweeping called with a non-sweeping config".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(TrainError::BadConfig("empty training set".into()));
    }
    let n_sites = model.n_sites();
    if n_sites < 2 {
        return Err(TrainError::BadConfig("sweeping needs at least 2 sites".into()));
    }
    let max_bond = cfg.max_bond.expect("validated");

    let canonical = tt::canonicalize(model, 0)?;
    let mut sites: Vec<DenseTensor> = canonical.sites().to_vec();
    let mut optimizer = Optimizer::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stream = BatchStream::new(data.train.len(), cfg.batch_size, &mut rng);
    let mut log = TrainLog::default();
    let mut monitored: Option<Monitored> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_weighted = 0.0;
        let mut samples = 0usize;
        let mut epoch_max_bond = 1usize;

        let mut visit = |
            sites: &mut Vec<DenseTensor>,
            optimizer: &mut Optimizer,
            rng: &mut ChaCha8Rng,
            stream: &mut BatchStream,
            bond: usize,
            left_to_right: bool,
            loss_weighted: &mut f64,
            samples: &mut usize,
            epoch_max_bond: &mut usize,
        | -> Result<()> {
            let merged = contract(&sites[bond], &sites[bond + 1])?;

            let idx = stream.next(rng);
            let batch = gather_batch(data.train, &idx);
            let targets = data.train_targets.as_ref().map(|t| subset_targets(t, &idx));

            let mut slots: Vec<DenseTensor> = Vec::with_capacity(n_sites - 1);
            slots.extend_from_slice(&sites[..bond]);
            slots.push(merged);
            slots.extend_from_slice(&sites[bond + 2..]);
            let out =
                batch_gradient_slots(&slots, &batch, targets.as_ref(), loss, Some(&[bond]))?;
            if !out.value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: bond });
            }
            *loss_weighted += out.value * idx.len() as f64;
            *samples += idx.len();

            let mut merged = slots.swap_remove(bond);
            let grad = out.gradients[bond].clone().expect("requested slot");
            let mut grads = [grad];
            clip_gradients(&mut grads, cfg.grad_clip);
            optimizer.step(bond, merged.data_mut(), grads[0].data());

            // split back, keeping the canonical center on the sweep side
            let rows_owned: Vec<String> = sites[bond]
                .indices()
                .iter()
                .map(|i| i.label().to_string())
                .filter(|l| *l != tt::bond_label(bond))
                .collect();
            let rows: Vec<&str> = rows_owned.iter().map(String::as_str).collect();
            let bond_name = tt::bond_label(bond);
            let svd = svd_with_bond_label(
                &merged,
                &rows,
                Some(max_bond),
                cfg.svd_cutoff,
                Some(&bond_name),
            )
            .map_err(|source| TrainError::Split { bond, source })?;
            debug_assert!(svd.rank() <= max_bond);
            *epoch_max_bond = (*epoch_max_bond).max(svd.rank());

            let mut u = svd.u;
            let mut v = svd.v;
            let rank = svd.rank();
            if left_to_right {
                // singular values move right, center lands on bond+1
                let row_len = v.len() / rank;
                for (i, &s) in svd.s.iter().enumerate() {
                    for value in &mut v.data_mut()[i * row_len..(i + 1) * row_len] {
                        *value *= s;
                    }
                }
            } else {
                let rows_count = u.len() / rank;
                for r in 0..rows_count {
                    for (c, &s) in svd.s.iter().enumerate() {
                        u.data_mut()[r * rank + c] *= s;
                    }
                }
            }
            if cfg.normalize_after_update {
                let center = if left_to_right { &mut v } else { &mut u };
                let scale = frobenius_norm(center);
                if scale > 0.0 {
                    for value in center.data_mut() {
                        *value /= scale;
                    }
                }
            }
            sites[bond] = u;
            sites[bond + 1] = v;
            Ok(())
        };

        for bond in 0..n_sites - 1 {
            visit(
                &mut sites,
                &mut optimizer,
                &mut rng,
                &mut stream,
                bond,
                true,
                &mut loss_weighted,
                &mut samples,
                &mut epoch_max_bond,
            )?;
        }
        for bond in (0..n_sites - 1).rev() {
            visit(
                &mut sites,
                &mut optimizer,
                &mut rng,
                &mut stream,
                bond,
                false,
                &mut loss_weighted,
                &mut samples,
                &mut epoch_max_bond,
            )?;
        }

        let mut snapshot = TensorTrain::new(sites.clone())?;
        snapshot.set_canonical_center(Some(0));
        let train_loss = loss_weighted / samples as f64;
        let val_loss = match data.val {
            Some(val) if !val.is_empty() => Some(loss_value(
                &snapshot,
                val,
                data.val_targets.as_ref(),
                loss,
            )?),
            _ => None,
        };
        let secs = started.elapsed().as_secs_f64();
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            epoch_seconds: secs,
            throughput: samples as f64 / secs.max(1e-12),
            max_bond_dim: epoch_max_bond,
        });

        if let Some(es) = &cfg.early_stopping {
            let value = monitored_value(es, train_loss, val_loss)?;
            match &mut monitored {
                None => {
                    monitored = Some(Monitored {
                        best_value: value,
                        best_model: snapshot.clone(),
                        stale_epochs: 0,
                    })
                }
                Some(state) => {
                    if value < state.best_value - es.min_delta {
                        state.best_value = value;
                        state.best_model = snapshot.clone();
                        state.stale_epochs = 0;
                    } else {
                        state.stale_epochs += 1;
                        if state.stale_epochs >= es.patience {
                            break 'epochs;
                        }
                    }
                }
            }
        }
    }

    let final_model = match monitored {
        Some(state) => state.best_model,
        None => {
            let mut tt = TensorTrain::new(sites)?;
            tt.set_canonical_center(Some(0));
            tt
        }
    };
    Ok((final_model, log))
}

/// Dispatches on `cfg.strategy`.
pub fn train(
    model: &TensorTrain,
    data: &TrainData,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(TensorTrain, TrainLog)> {
    match cfg.strategy {
        Strategy::GradientDescent => train_gradient_descent(model, data, loss, cfg),
        Strategy::Sweeping => train_sweeping(model, data, loss, cfg),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-sample model outputs plus task-specific derived quantities.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub outputs: Vec<Output>,
    pub probabilities: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<usize>>,
    pub scores: Option<Vec<f64>>,
}

/// Runs the model over a dataset. Models with one output index yield logits,
/// softmax probabilities and argmax labels; all other models yield the
/// anomaly score `D(x) = ||P phi(x)||^2`.
pub fn predict(model: &TensorTrain, states: &[EmbeddedState]) -> Result<Predictions> {
    let single_output = model.lower_positions().len() == 1;
    if single_output {
        let mut outputs = Vec::with_capacity(states.len());
        let mut probabilities = Vec::with_capacity(states.len());
        let mut labels = Vec::with_capacity(states.len());
        for state in states {
            let out = model_output(model, state)?;
            let logits = out.as_vector();
            let probs = softmax(&logits);
            let label = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            outputs.push(out);
            probabilities.push(probs);
            labels.push(label);
        }
        Ok(Predictions {
            outputs,
            probabilities: Some(probabilities),
            labels: Some(labels),
            scores: None,
        })
    } else {
        let mut outputs = Vec::with_capacity(states.len());
        let mut scores = Vec::with_capacity(states.len());
        for state in states {
            let score = crate::objective::anomaly_score(model, state)?;
            scores.push(score);
            if model.lower_positions().is_empty() {
                outputs.push(model_output(model, state)?);
            }
        }
        Ok(Predictions {
            outputs,
            probabilities: None,
            labels: None,
            scores: Some(scores),
        })
    }
}
