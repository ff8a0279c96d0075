//! Objective functions with analytic per-tensor gradients.
//!
//! Gradients come from environment contraction: the derivative of a full
//! network contraction with respect to one site tensor is the network with
//! that tensor removed. Left and right partial contractions are cached per
//! sample, so a whole-model gradient costs O(N) contractions instead of
//! O(N^2).
//!
//! Two network layouts cover every loss here:
//!
//! - *linear*: the model contracted once with the embedded state, producing a
//!   scalar or a vector on the model's single output index (classification,
//!   regression, scalar overlaps);
//! - *sandwich*: the model and its mirror copy contracted with two copies of
//!   the state, producing the squared norm `D(x) = ||P phi(x)||^2` (anomaly
//!   and likelihood losses on operators).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddedState;
use crate::tensor::{contract, DenseTensor, Index, TensorError};
use crate::tt::{self, TensorTrain, TtError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Tt(#[from] TtError),

    #[error("sample {sample}: transformed state has zero norm")]
    ZeroNormSample { sample: usize },

    #[error("sample {sample}: model output is zero")]
    ZeroOutput { sample: usize },

    #[error("sample {sample}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        classes: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at sample {sample}")]
    NonFiniteSample { sample: usize },

    #[error("non-finite gradient at site {site}")]
    NonFiniteSite { site: usize },

    #[error("loss not applicable: {0}")]
    NotApplicable(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Placement of the `-1` shift in the log-quadratic norm loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogQuadVariant {
    /// `(log ||P phi||^2 - 1)^2`: pushes squared norms onto the shell `e`.
    #[default]
    MinusOne,
    /// `(log ||P phi||^2)^2`: pushes squared norms to 1.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryLoss {
    LogQuadNorm {
        #[serde(default)]
        variant: LogQuadVariant,
    },
    NegLogLikelihood,
    CrossEntropySoftmax {
        #[serde(default)]
        reduction: Reduction,
    },
    MeanSquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    LogNorm,
    ReluLogNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTerm {
    pub kind: RegKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub primary: PrimaryLoss,
    #[serde(default)]
    pub regularizers: Vec<RegTerm>,
}

impl LossSpec {
    pub fn new(primary: PrimaryLoss) -> Self {
        LossSpec {
            primary,
            regularizers: Vec::new(),
        }
    }
}

/// Supervision targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

/// Scalar loss with per-sample breakdown and one gradient tensor per site.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub per_sample_values: Vec<f64>,
    pub gradients: Vec<DenseTensor>,
    pub regularizer_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Output {
    pub fn as_vector(&self) -> Vec<f64> {
        match self {
            Output::Scalar(v) => vec![*v],
            Output::Vector(v) => v.clone(),
        }
    }
}

/// Original site positions of a slot's upper indices, matching labels of the
/// form `in<digits><suffix>` exactly.
fn upper_positions(slot: &DenseTensor, suffix: &str) -> Vec<usize> {
    slot.indices()
        .iter()
        .filter_map(|i| {
            let digits = i.label().strip_suffix(suffix)?.strip_prefix("in")?;
            if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
                return None;
            }
            digits.parse::<usize>().ok()
        })
        .collect()
}

fn lower_labels(slots: &[DenseTensor]) -> Vec<String> {
    slots
        .iter()
        .flat_map(|s| s.indices())
        .filter(|i| {
            i.label()
                .strip_prefix("out")
                .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()))
        })
        .map(|i| i.label().to_string())
        .collect()
}

/// One order-1 tensor per original site position, labeled `in{k}` (plus
/// relabeled state bonds for entangled states).
fn state_site_tensors(state: &EmbeddedState, suffix: &str) -> Result<Vec<DenseTensor>> {
    match state {
        EmbeddedState::Product(locals) => locals
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let label = format!("{}{}", tt::upper_label(k), suffix);
                Ok(DenseTensor::from_data(
                    vec![Index::new(label, v.len())],
                    v.clone(),
                )?)
            })
            .collect(),
        EmbeddedState::Entangled(mps) => {
            let bond_suffix = format!("_st{suffix}");
            let sites = mps.bond_relabeled_sites(&bond_suffix);
            sites
                .into_iter()
                .enumerate()
                .map(|(k, site)| {
                    if suffix.is_empty() {
                        Ok(site)
                    } else {
                        let from = tt::upper_label(k);
                        Ok(site.relabeled(&from, &format!("{from}{suffix}"))?)
                    }
                })
                .collect()
        }
    }
}

fn conform_to(tensor: DenseTensor, reference: &DenseTensor) -> Result<DenseTensor> {
    let labels: Vec<&str> = reference.indices().iter().map(|i| i.label()).collect();
    Ok(tensor.permuted(&labels)?)
}

fn add_scaled(acc: &mut DenseTensor, term: &DenseTensor, factor: f64) {
    debug_assert_eq!(acc.len(), term.len());
    for (a, t) in acc.data_mut().iter_mut().zip(term.data()) {
        *a += factor * t;
    }
}

/// Model slots contracted with their state sites, one reduced tensor per
/// slot. A slot may span several original sites (merged two-site blocks).
fn reduced_slots(
    slots: &[DenseTensor],
    state_sites: &[DenseTensor],
    suffix: &str,
) -> Result<Vec<(Vec<usize>, DenseTensor)>> {
    slots
        .iter()
        .map(|slot| {
            let positions = upper_positions(slot, suffix);
            let mut acc = slot.clone();
            for &p in &positions {
                if p >= state_sites.len() {
                    return Err(LossError::ShapeMismatch(format!(
                        "model expects site {p} but the state has {} sites",
                        state_sites.len()
                    )));
                }
                acc = contract(&acc, &state_sites[p])?;
            }
            Ok((positions, acc))
        })
        .collect()
}

/// Left/right partial contractions of a chain of reduced tensors.
fn chain_caches(reduced: &[DenseTensor]) -> Result<(Vec<DenseTensor>, Vec<DenseTensor>)> {
    let n = reduced.len();
    let mut left = Vec::with_capacity(n);
    for (i, r) in reduced.iter().enumerate() {
        let next = if i == 0 {
            r.clone()
        } else {
            contract(&left[i - 1], r)?
        };
        left.push(next);
    }
    let mut right = vec![DenseTensor::scalar(1.0); n];
    for i in (0..n).rev() {
        right[i] = if i == n - 1 {
            reduced[i].clone()
        } else {
            contract(&reduced[i], &right[i + 1])?
        };
    }
    Ok((left, right))
}

/// Forward pass of the linear network: model slots contracted with the state.
/// Returns the open-output tensor (order 0 or 1).
fn linear_forward(slots: &[DenseTensor], state_sites: &[DenseTensor]) -> Result<DenseTensor> {
    let reduced = reduced_slots(slots, state_sites, "")?;
    let mut acc: Option<DenseTensor> = None;
    for (_, r) in reduced {
        acc = Some(match acc {
            Some(t) => contract(&t, &r)?,
            None => r,
        });
    }
    Ok(acc.expect("at least one slot"))
}

/// Full linear-network pass with per-slot environments.
///
/// `cotangent` is contracted into each environment: a scalar for scalar
/// outputs, or a vector on the output label. Environments are returned only
/// for slots selected by `grad_filter`.
fn linear_gradients(
    slots: &[DenseTensor],
    state_sites: &[DenseTensor],
    cotangent: &DenseTensor,
    grad_filter: Option<&[usize]>,
) -> Result<Vec<Option<DenseTensor>>> {
    let reduced = reduced_slots(slots, state_sites, "")?;
    let tensors: Vec<DenseTensor> = reduced.iter().map(|(_, t)| t.clone()).collect();
    let (left, right) = chain_caches(&tensors)?;
    let n = slots.len();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let wanted = grad_filter.is_none_or(|f| f.contains(&i));
        if !wanted {
            grads.push(None);
            continue;
        }
        let mut env: Option<DenseTensor> = if i > 0 { Some(left[i - 1].clone()) } else { None };
        for &p in &reduced[i].0 {
            let state = &state_sites[p];
            env = Some(match env {
                Some(t) => contract(&t, state)?,
                None => state.clone(),
            });
        }
        if i + 1 < n {
            env = Some(match env {
                Some(t) => contract(&t, &right[i + 1])?,
                None => right[i + 1].clone(),
            });
        }
        let env = match env {
            Some(t) => contract(&t, cotangent)?,
            None => cotangent.clone(),
        };
        grads.push(Some(conform_to(env, &slots[i])?));
    }
    Ok(grads)
}

/// Mirror copies of the model slots for sandwich networks: bonds and upper
/// labels suffixed `_br`, lower labels shared with the ket copy.
fn bra_slots(slots: &[DenseTensor]) -> Vec<DenseTensor> {
    slots
        .iter()
        .map(|slot| {
            let mut out = slot.clone();
            let labels: Vec<String> = out
                .indices()
                .iter()
                .map(|i| i.label().to_string())
                .collect();
            for label in labels {
                let is_bond = label.starts_with("bond");
                let is_upper = label
                    .strip_prefix("in")
                    .is_some_and(|r| r.chars().all(|c| c.is_ascii_digit()));
                if is_bond || is_upper {
                    out = out
                        .relabeled(&label, &format!("{label}_br"))
                        .expect("labels are unique");
                }
            }
            out
        })
        .collect()
}

/// Sandwich value `D = ||P phi||^2` for one sample.
fn sandwich_forward(
    ket_reduced: &[DenseTensor],
    bra_reduced: &[DenseTensor],
) -> Result<f64> {
    let mut env: Option<DenseTensor> = None;
    for (k, b) in ket_reduced.iter().zip(bra_reduced) {
        let with_ket = match env {
            Some(t) => contract(&t, k)?,
            None => k.clone(),
        };
        env = Some(contract(&with_ket, b)?);
    }
    env.and_then(|t| t.scalar_value())
        .ok_or_else(|| LossError::ShapeMismatch("sandwich network left open indices".into()))
}

/// Per-slot ket-side environments of the sandwich network (the gradient of
/// `D` with respect to the ket slot is twice the environment).
fn sandwich_environments(
    slots: &[DenseTensor],
    ket_reduced: &[(Vec<usize>, DenseTensor)],
    bra_reduced: &[DenseTensor],
    ket_state: &[DenseTensor],
    grad_filter: Option<&[usize]>,
) -> Result<(f64, Vec<Option<DenseTensor>>)> {
    let n = slots.len();
    let mut left: Vec<DenseTensor> = Vec::with_capacity(n);
    for i in 0..n {
        let prev = if i == 0 {
            None
        } else {
            Some(left[i - 1].clone())
        };
        let with_ket = match prev {
            Some(t) => contract(&t, &ket_reduced[i].1)?,
            None => ket_reduced[i].1.clone(),
        };
        left.push(contract(&with_ket, &bra_reduced[i])?);
    }
    let value = left[n - 1]
        .scalar_value()
        .ok_or_else(|| LossError::ShapeMismatch("sandwich network left open indices".into()))?;

    let mut right: Vec<DenseTensor> = vec![DenseTensor::scalar(1.0); n];
    for i in (0..n).rev() {
        let next = if i == n - 1 {
            None
        } else {
            Some(right[i + 1].clone())
        };
        let with_ket = match next {
            Some(t) => contract(&ket_reduced[i].1, &t)?,
            None => ket_reduced[i].1.clone(),
        };
        right[i] = contract(&with_ket, &bra_reduced[i])?;
    }

    let mut envs = Vec::with_capacity(n);
    for i in 0..n {
        let wanted = grad_filter.is_none_or(|f| f.contains(&i));
        if !wanted {
            envs.push(None);
            continue;
        }
        let mut env: Option<DenseTensor> = if i > 0 { Some(left[i - 1].clone()) } else { None };
        env = Some(match env {
            Some(t) => contract(&t, &bra_reduced[i])?,
            None => bra_reduced[i].clone(),
        });
        if i + 1 < n {
            env = Some(contract(&env.unwrap(), &right[i + 1])?);
        }
        let mut env = env.unwrap();
        for &p in &ket_reduced[i].0 {
            env = contract(&env, &ket_state[p])?;
        }
        envs.push(Some(conform_to(env, &slots[i])?));
    }
    Ok((value, envs))
}

/// Numerically stable softmax cross-entropy: loss and gradient w.r.t. logits.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    (loss, grad)
}

enum Route {
    Linear,
    Sandwich,
}

fn pick_route(spec: &LossSpec, lowers: &[String]) -> Result<Route> {
    match spec.primary {
        PrimaryLoss::CrossEntropySoftmax { .. } => {
            if lowers.len() != 1 {
                return Err(LossError::NotApplicable(format!(
                    "cross-entropy needs exactly one output index, model has {}",
                    lowers.len()
                )));
            }
            Ok(Route::Linear)
        }
        PrimaryLoss::MeanSquaredError => {
            if lowers.len() > 1 {
                return Err(LossError::NotApplicable(format!(
                    "mean squared error needs at most one output index, model has {}",
                    lowers.len()
                )));
            }
            Ok(Route::Linear)
        }
        PrimaryLoss::LogQuadNorm { .. } | PrimaryLoss::NegLogLikelihood => {
            if lowers.is_empty() {
                Ok(Route::Linear)
            } else {
                Ok(Route::Sandwich)
            }
        }
    }
}

/// Loss value, per-sample breakdown, and gradients for the selected slots.
///
/// `slots` is normally the model's site list; the sweeping optimizer passes a
/// view with two sites merged into one slot.
pub(crate) fn batch_gradient_slots(
    slots: &[DenseTensor],
    batch: &[EmbeddedState],
    targets: Option<&Targets>,
    spec: &LossSpec,
    grad_filter: Option<&[usize]>,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let lowers = lower_labels(slots);
    let route = pick_route(spec, &lowers)?;
    let n_batch = batch.len();
    let mean_scale = 1.0 / n_batch as f64;

    let mut grads: Vec<Option<DenseTensor>> = slots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if grad_filter.is_none_or(|f| f.contains(&i)) {
                Some(DenseTensor::zeros(s.indices().to_vec()))
            } else {
                None
            }
        })
        .collect();
    let mut per_sample = Vec::with_capacity(n_batch);
    let mut primary_total = 0.0;

    let bra = match route {
        Route::Sandwich => bra_slots(slots),
        Route::Linear => Vec::new(),
    };

    for (sample, state) in batch.iter().enumerate() {
        match route {
            Route::Linear => {
                let state_sites = state_site_tensors(state, "")?;
                let out = linear_forward(slots, &state_sites)?;
                let (loss, cotangent, scale) =
                    linear_chain(spec, &out, targets, sample, n_batch)?;
                if !loss.is_finite() {
                    return Err(LossError::NonFiniteSample { sample });
                }
                per_sample.push(loss);
                primary_total += loss * scale;

                let sample_grads =
                    linear_gradients(slots, &state_sites, &cotangent, grad_filter)?;
                for (acc, term) in grads.iter_mut().zip(sample_grads) {
                    if let (Some(acc), Some(term)) = (acc, term) {
                        add_scaled(acc, &term, scale);
                    }
                }
            }
            Route::Sandwich => {
                let ket_state = state_site_tensors(state, "")?;
                let bra_state = state_site_tensors(state, "_br")?;
                let ket_reduced = reduced_slots(slots, &ket_state, "")?;
                let bra_reduced: Vec<DenseTensor> = reduced_slots(&bra, &bra_state, "_br")?
                    .into_iter()
                    .map(|(_, t)| t)
                    .collect();
                let (d, envs) = sandwich_environments(
                    slots,
                    &ket_reduced,
                    &bra_reduced,
                    &ket_state,
                    grad_filter,
                )?;
                if !d.is_finite() {
                    return Err(LossError::NonFiniteSample { sample });
                }
                let (loss, dfactor) = sandwich_chain(spec, d, sample)?;
                per_sample.push(loss);
                primary_total += loss * mean_scale;
                // d loss / d slot = dfactor * 2 * environment, averaged
                let factor = dfactor * 2.0 * mean_scale;
                for (acc, env) in grads.iter_mut().zip(envs) {
                    if let (Some(acc), Some(env)) = (acc, env) {
                        add_scaled(acc, &env, factor);
                    }
                }
            }
        }
    }

    let mut regularizer_value = 0.0;
    for term in &spec.regularizers {
        if term.weight == 0.0 {
            continue;
        }
        let (value, envs) = frobenius_environments(slots, grad_filter)?;
        if value <= 0.0 {
            return Err(LossError::NotApplicable(
                "log-norm regularizer on a zero-norm model".into(),
            ));
        }
        let plain = value.ln();
        let active = match term.kind {
            RegKind::LogNorm => true,
            RegKind::ReluLogNorm => plain > 0.0,
        };
        let reg_value = match term.kind {
            RegKind::LogNorm => plain,
            RegKind::ReluLogNorm => plain.max(0.0),
        };
        regularizer_value += term.weight * reg_value;
        if active {
            let factor = term.weight * 2.0 / value;
            for (acc, env) in grads.iter_mut().zip(envs) {
                if let (Some(acc), Some(env)) = (acc, env) {
                    add_scaled(acc, &env, factor);
                }
            }
        }
    }

    for (site, grad) in grads.iter().enumerate() {
        if let Some(g) = grad {
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(LossError::NonFiniteSite { site });
            }
        }
    }

    Ok(BatchGradient {
        value: primary_total + regularizer_value,
        per_sample_values: per_sample,
        gradients: grads,
        regularizer_value,
    })
}

pub(crate) struct BatchGradient {
    pub value: f64,
    pub per_sample_values: Vec<f64>,
    pub gradients: Vec<Option<DenseTensor>>,
    pub regularizer_value: f64,
}

/// Per-sample loss and cotangent for the linear route. Returns the loss, the
/// cotangent tensor to contract into environments, and the reduction scale.
fn linear_chain(
    spec: &LossSpec,
    out: &DenseTensor,
    targets: Option<&Targets>,
    sample: usize,
    n_batch: usize,
) -> Result<(f64, DenseTensor, f64)> {
    let mean_scale = 1.0 / n_batch as f64;
    match &spec.primary {
        PrimaryLoss::CrossEntropySoftmax { reduction } => {
            let logits_tensor = out;
            let logits = logits_tensor.data().to_vec();
            let label = match targets {
                Some(Targets::Classes(labels)) => labels.get(sample).copied().ok_or_else(|| {
                    LossError::ShapeMismatch("fewer labels than samples".into())
                })?,
                _ => {
                    return Err(LossError::NotApplicable(
                        "cross-entropy needs class labels".into(),
                    ))
                }
            };
            if label >= logits.len() {
                return Err(LossError::LabelOutOfRange {
                    sample,
                    label,
                    classes: logits.len(),
                });
            }
            let (loss, grad) = softmax_cross_entropy(&logits, label);
            let cotangent =
                DenseTensor::from_data(logits_tensor.indices().to_vec(), grad)?;
            let scale = match reduction {
                Reduction::Mean => mean_scale,
                Reduction::Sum => 1.0,
            };
            Ok((loss, cotangent, scale))
        }
        PrimaryLoss::MeanSquaredError => {
            let target = match targets {
                Some(Targets::Values(values)) => values.get(sample).ok_or_else(|| {
                    LossError::ShapeMismatch("fewer targets than samples".into())
                })?,
                _ => {
                    return Err(LossError::NotApplicable(
                        "mean squared error needs value targets".into(),
                    ))
                }
            };
            let pred = out.data();
            if pred.len() != target.len() {
                return Err(LossError::ShapeMismatch(format!(
                    "prediction has {} components, target has {}",
                    pred.len(),
                    target.len()
                )));
            }
            let c = pred.len() as f64;
            let loss: f64 = pred
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / c;
            let grad: Vec<f64> = pred
                .iter()
                .zip(target)
                .map(|(p, t)| 2.0 * (p - t) / c)
                .collect();
            let cotangent = DenseTensor::from_data(out.indices().to_vec(), grad)?;
            Ok((loss, cotangent, mean_scale))
        }
        PrimaryLoss::LogQuadNorm { variant } => {
            let y = out
                .scalar_value()
                .ok_or_else(|| LossError::NotApplicable("expected a scalar output".into()))?;
            let d = y * y;
            if d <= 0.0 {
                return Err(LossError::ZeroNormSample { sample });
            }
            let shift = match variant {
                LogQuadVariant::MinusOne => 1.0,
                LogQuadVariant::Plain => 0.0,
            };
            let loss = (d.ln() - shift) * (d.ln() - shift);
            // d loss / d y = 2 (ln d - shift) * 2 / y
            let dy = 4.0 * (d.ln() - shift) / y;
            Ok((loss, DenseTensor::scalar(dy), mean_scale))
        }
        PrimaryLoss::NegLogLikelihood => {
            let y = out
                .scalar_value()
                .ok_or_else(|| LossError::NotApplicable("expected a scalar output".into()))?;
            let d = y * y;
            if d <= 0.0 {
                return Err(LossError::ZeroOutput { sample });
            }
            let loss = -d.ln();
            let dy = -2.0 / y;
            Ok((loss, DenseTensor::scalar(dy), mean_scale))
        }
    }
}

/// Per-sample loss and `d loss / d D` for the sandwich route.
fn sandwich_chain(spec: &LossSpec, d: f64, sample: usize) -> Result<(f64, f64)> {
    match &spec.primary {
        PrimaryLoss::LogQuadNorm { variant } => {
            if d <= 0.0 {
                return Err(LossError::ZeroNormSample { sample });
            }
            let shift = match variant {
                LogQuadVariant::MinusOne => 1.0,
                LogQuadVariant::Plain => 0.0,
            };
            let loss = (d.ln() - shift) * (d.ln() - shift);
            Ok((loss, 2.0 * (d.ln() - shift) / d))
        }
        PrimaryLoss::NegLogLikelihood => {
            if d <= 0.0 {
                return Err(LossError::ZeroOutput { sample });
            }
            Ok((-d.ln(), -1.0 / d))
        }
        _ => Err(LossError::NotApplicable(
            "loss needs a scalar or vector output, not a norm".into(),
        )),
    }
}

/// Frobenius-norm sandwich of the bare model: returns `||P||_F^2` and the
/// per-slot ket environments.
fn frobenius_environments(
    slots: &[DenseTensor],
    grad_filter: Option<&[usize]>,
) -> Result<(f64, Vec<Option<DenseTensor>>)> {
    let n = slots.len();
    let bra: Vec<DenseTensor> = slots
        .iter()
        .map(|slot| {
            let mut out = slot.clone();
            let labels: Vec<String> = out
                .indices()
                .iter()
                .map(|i| i.label().to_string())
                .collect();
            for label in labels {
                if label.starts_with("bond") {
                    out = out
                        .relabeled(&label, &format!("{label}_br"))
                        .expect("labels are unique");
                }
            }
            out
        })
        .collect();

    let mut left: Vec<DenseTensor> = Vec::with_capacity(n);
    for i in 0..n {
        let with_ket = if i == 0 {
            slots[0].clone()
        } else {
            contract(&left[i - 1], &slots[i])?
        };
        left.push(contract(&with_ket, &bra[i])?);
    }
    let value = left[n - 1]
        .scalar_value()
        .ok_or_else(|| LossError::ShapeMismatch("norm network left open indices".into()))?;

    let mut right: Vec<DenseTensor> = vec![DenseTensor::scalar(1.0); n];
    for i in (0..n).rev() {
        let with_ket = if i == n - 1 {
            slots[i].clone()
        } else {
            contract(&slots[i], &right[i + 1])?
        };
        right[i] = contract(&with_ket, &bra[i])?;
    }

    let mut envs = Vec::with_capacity(n);
    for i in 0..n {
        let wanted = grad_filter.is_none_or(|f| f.contains(&i));
        if !wanted {
            envs.push(None);
            continue;
        }
        let mut env = if i > 0 {
            contract(&left[i - 1], &bra[i])?
        } else {
            bra[i].clone()
        };
        if i + 1 < n {
            env = contract(&env, &right[i + 1])?;
        }
        envs.push(Some(conform_to(env, &slots[i])?));
    }
    Ok((value, envs))
}

/// Contracts the model with one embedded state along the zipper path.
/// A model with no output index yields a scalar; exactly one output index
/// yields a vector; more is an error.
pub fn model_output(model: &TensorTrain, state: &EmbeddedState) -> Result<Output> {
    let lowers = lower_labels(model.sites());
    if lowers.len() > 1 {
        return Err(LossError::NotApplicable(format!(
            "model has {} open output indices",
            lowers.len()
        )));
    }
    let state_sites = state_site_tensors(state, "")?;
    let out = linear_forward(model.sites(), &state_sites)?;
    match out.scalar_value() {
        Some(v) => Ok(Output::Scalar(v)),
        None => Ok(Output::Vector(out.data().to_vec())),
    }
}

/// Anomaly score `D(x) = ||P phi(x)||^2` (for models without output indices,
/// the squared scalar overlap).
pub fn anomaly_score(model: &TensorTrain, state: &EmbeddedState) -> Result<f64> {
    let lowers = lower_labels(model.sites());
    if lowers.is_empty() {
        let out = linear_forward(model.sites(), &state_site_tensors(state, "")?)?;
        let y = out
            .scalar_value()
            .ok_or_else(|| LossError::ShapeMismatch("expected scalar output".into()))?;
        return Ok(y * y);
    }
    let ket_state = state_site_tensors(state, "")?;
    let bra_state = state_site_tensors(state, "_br")?;
    let bra = bra_slots(model.sites());
    let ket_reduced: Vec<DenseTensor> = reduced_slots(model.sites(), &ket_state, "")?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let bra_reduced: Vec<DenseTensor> = reduced_slots(&bra, &bra_state, "_br")?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    sandwich_forward(&ket_reduced, &bra_reduced)
}

/// Loss value and analytic gradients for every model site.
pub fn gradient_engine(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    targets: Option<&Targets>,
    spec: &LossSpec,
) -> Result<LossReport> {
    let out = batch_gradient_slots(model.sites(), batch, targets, spec, None)?;
    Ok(LossReport {
        value: out.value,
        per_sample_values: out.per_sample_values,
        gradients: out
            .gradients
            .into_iter()
            .map(|g| g.expect("all slots requested"))
            .collect(),
        regularizer_value: out.regularizer_value,
    })
}

/// Loss value only (no gradients): the cheap path for validation losses and
/// finite differencing.
pub fn loss_value(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    targets: Option<&Targets>,
    spec: &LossSpec,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let lowers = lower_labels(model.sites());
    let route = pick_route(spec, &lowers)?;
    let n_batch = batch.len();
    let mean_scale = 1.0 / n_batch as f64;
    let mut total = 0.0;
    for (sample, state) in batch.iter().enumerate() {
        match route {
            Route::Linear => {
                let state_sites = state_site_tensors(state, "")?;
                let out = linear_forward(model.sites(), &state_sites)?;
                let (loss, _, scale) = linear_chain(spec, &out, targets, sample, n_batch)?;
                total += loss * scale;
            }
            Route::Sandwich => {
                let d = anomaly_score(model, state)?;
                let (loss, _) = sandwich_chain(spec, d, sample)?;
                total += loss * mean_scale;
            }
        }
        if !total.is_finite() {
            return Err(LossError::NonFiniteSample { sample });
        }
    }
    for term in &spec.regularizers {
        if term.weight == 0.0 {
            continue;
        }
        let value = tt::norm(model)?.powi(2);
        if value <= 0.0 {
            return Err(LossError::NotApplicable(
                "log-norm regularizer on a zero-norm model".into(),
            ));
        }
        let plain = value.ln();
        total += term.weight
            * match term.kind {
                RegKind::LogNorm => plain,
                RegKind::ReluLogNorm => plain.max(0.0),
            };
    }
    Ok(total)
}

pub fn loss_log_quad_norm(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    variant: LogQuadVariant,
) -> Result<LossReport> {
    gradient_engine(
        model,
        batch,
        None,
        &LossSpec::new(PrimaryLoss::LogQuadNorm { variant }),
    )
}

pub fn loss_nll(model: &TensorTrain, batch: &[EmbeddedState]) -> Result<LossReport> {
    gradient_engine(model, batch, None, &LossSpec::new(PrimaryLoss::NegLogLikelihood))
}

pub fn loss_cross_entropy_softmax(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    labels: &[usize],
    reduction: Reduction,
) -> Result<LossReport> {
    gradient_engine(
        model,
        batch,
        Some(&Targets::Classes(labels.to_vec())),
        &LossSpec::new(PrimaryLoss::CrossEntropySoftmax { reduction }),
    )
}

pub fn loss_mse(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    targets: &[Vec<f64>],
) -> Result<LossReport> {
    gradient_engine(
        model,
        batch,
        Some(&Targets::Values(targets.to_vec())),
        &LossSpec::new(PrimaryLoss::MeanSquaredError),
    )
}

/// The log-norm regularizer value on its own.
pub fn reg_log_norm(model: &TensorTrain, kind: RegKind) -> Result<f64> {
    let norm_sq = tt::norm(model)?.powi(2);
    if norm_sq <= 0.0 {
        return Err(LossError::NotApplicable(
            "log-norm of a zero-norm model".into(),
        ));
    }
    Ok(match kind {
        RegKind::LogNorm => norm_sq.ln(),
        RegKind::ReluLogNorm => norm_sq.ln().max(0.0),
    })
}

/// Central finite differences of the total loss, entry by entry.
pub fn finite_difference_gradient(
    model: &TensorTrain,
    batch: &[EmbeddedState],
    targets: Option<&Targets>,
    spec: &LossSpec,
    h: f64,
) -> Result<Vec<DenseTensor>> {
    if !(h > 0.0) {
        return Err(LossError::ShapeMismatch("step size must be positive".into()));
    }
    let mut work = model.clone();
    let mut grads = Vec::with_capacity(model.n_sites());
    for site in 0..model.n_sites() {
        let len = model.site(site).len();
        let mut grad = vec![0.0; len];
        for entry in 0..len {
            let original = model.site(site).data()[entry];
            work.sites_mut()[site].data_mut()[entry] = original + h;
            let plus = loss_value(&work, batch, targets, spec)?;
            work.sites_mut()[site].data_mut()[entry] = original - h;
            let minus = loss_value(&work, batch, targets, spec)?;
            work.sites_mut()[site].data_mut()[entry] = original;
            grad[entry] = (plus - minus) / (2.0 * h);
        }
        grads.push(DenseTensor::from_parts(
            model.site(site).indices().to_vec(),
            grad,
        ));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_product_state, LocalMap};
    use crate::init::{init_model, InitScheme, InitSpec};
    use crate::tt::{build_shape, to_dense, LowerSpec, SpacingSpec, TensorTrain};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, dims: &[usize]) -> EmbeddedState {
        EmbeddedState::Product(
            dims.iter()
                .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, lower: Option<LowerSpec>, bond: usize) -> TensorTrain {
        let sigs = build_shape(n, &vec![2; n], lower.as_ref(), bond).unwrap();
        let spec = InitSpec {
            scheme: InitScheme::Randn {
                mu: 0.0,
                sigma: 0.8,
                noise_sigma: None,
            },
            seed: rng.random(),
        };
        init_model(&sigs, &spec).unwrap()
    }

    fn classifier_model(rng: &mut ChaCha8Rng, n: usize, classes: usize, bond: usize) -> TensorTrain {
        let lower = LowerSpec {
            spacing: SpacingSpec::Explicit(vec![n / 2]),
            dim: classes,
        };
        random_model(rng, n, Some(lower), bond)
    }

    fn check_gradients(
        model: &TensorTrain,
        batch: &[EmbeddedState],
        targets: Option<&Targets>,
        spec: &LossSpec,
    ) {
        let report = gradient_engine(model, batch, targets, spec).unwrap();
        let numeric = finite_difference_gradient(model, batch, targets, spec, 1e-5).unwrap();
        let mut checked = 0;
        for (site, (analytic, fd)) in report.gradients.iter().zip(&numeric).enumerate() {
            for (slot, (a, n)) in analytic.data().iter().zip(fd.data()).enumerate() {
                if a.abs() > 1e-8 {
                    let rel = (a - n).abs() / a.abs().max(n.abs());
                    assert!(
                        rel < 1e-6,
                        "site {site} entry {slot}: analytic {a} vs numeric {n} (rel {rel:e})"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 0, "no gradient entries above threshold");
    }

    #[test]
    fn model_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scalar_model = random_model(&mut rng, 4, None, 3);
        let state = random_state(&mut rng, &[2, 2, 2, 2]);
        match model_output(&scalar_model, &state).unwrap() {
            Output::Scalar(_) => {}
            other => panic!("expected scalar, got {other:?}"),
        }

        let classifier = classifier_model(&mut rng, 4, 2, 3);
        match model_output(&classifier, &state).unwrap() {
            Output::Vector(v) => assert_eq!(v.len(), 2),
            other => panic!("expected vector, got {other:?}"),
        }

        let smpo = random_model(
            &mut rng,
            4,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            3,
        );
        assert!(matches!(
            model_output(&smpo, &state),
            Err(LossError::NotApplicable(_))
        ));
    }

    #[test]
    fn model_output_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let classifier = classifier_model(&mut rng, 4, 3, 3);
        let state = random_state(&mut rng, &[2, 2, 2, 2]);
        let out = match model_output(&classifier, &state).unwrap() {
            Output::Vector(v) => v,
            _ => unreachable!(),
        };

        let dense = to_dense(&classifier, None).unwrap();
        let state_mps = state.to_mps().unwrap();
        let state_dense = to_dense(&state_mps, None).unwrap();
        let oracle = contract(&dense, &state_dense).unwrap();
        for (a, b) in out.iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn anomaly_score_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let smpo = random_model(
            &mut rng,
            5,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            4,
        );
        let state = random_state(&mut rng, &[2; 5]);
        let d = anomaly_score(&smpo, &state).unwrap();

        let dense = to_dense(&smpo, None).unwrap();
        let state_dense = to_dense(&state.to_mps().unwrap(), None).unwrap();
        let transformed = contract(&dense, &state_dense).unwrap();
        let oracle: f64 = transformed.data().iter().map(|v| v * v).sum();
        assert!((d - oracle).abs() < 1e-10 * oracle.max(1.0));
    }

    #[test]
    fn log_quad_norm_fixed_points() {
        // identity-like MPO scaled so that ||P phi||^2 = e for a unit state
        let n = 2;
        let scale = std::f64::consts::E.sqrt();
        let mut sites = Vec::new();
        for k in 0..n {
            let mut indices = Vec::new();
            if k > 0 {
                indices.push(Index::new(tt::bond_label(k - 1), 1));
            }
            indices.push(Index::new(tt::upper_label(k), 2));
            indices.push(Index::new(tt::lower_label(k), 2));
            if k + 1 < n {
                indices.push(Index::new(tt::bond_label(k), 1));
            }
            let eye = DenseTensor::identity("r", "c", 2);
            let data: Vec<f64> = eye
                .data()
                .iter()
                .map(|v| v * if k == 0 { scale } else { 1.0 })
                .collect();
            sites.push(DenseTensor::from_data(indices, data).unwrap());
        }
        let op = TensorTrain::new(sites).unwrap();
        let state = EmbeddedState::Product(vec![vec![1.0, 0.0], vec![0.6, 0.8]]);

        let report = loss_log_quad_norm(&op, &[state.clone()], LogQuadVariant::MinusOne).unwrap();
        assert!(report.value.abs() < 1e-12, "loss {}", report.value);

        // unscaled identity: D = 1, loss (0 - 1)^2 = 1
        let mut plain_sites = op.sites().to_vec();
        plain_sites[0] = plain_sites[0].clone().scale(1.0 / scale);
        let plain_op = TensorTrain::new(plain_sites).unwrap();
        let report = loss_log_quad_norm(&plain_op, &[state], LogQuadVariant::MinusOne).unwrap();
        assert!((report.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_fixed_points() {
        let state = EmbeddedState::Product(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let unit = TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let report = loss_nll(&unit, &[state.clone()]).unwrap();
        assert!(report.value.abs() < 1e-12);

        let scaled = {
            let mut sites = unit.sites().to_vec();
            sites[0] = sites[0].clone().scale((-0.5f64).exp());
            TensorTrain::new(sites).unwrap()
        };
        // |y|^2 = e^{ -1 } so the NLL is 1
        let report = loss_nll(&scaled, &[state]).unwrap();
        assert!((report.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let (loss, _) = softmax_cross_entropy(&[0.3, 0.3, 0.3, 0.3], 2);
        assert!((loss - 4.0_f64.ln()).abs() < 1e-15);

        let (loss, _) = softmax_cross_entropy(&[100.0, 0.0], 0);
        assert!(loss.abs() < 1e-10);

        // gradient equals softmax - one_hot, checked by finite differences
        let logits = [0.4, -1.2, 0.7];
        let (_, grad) = softmax_cross_entropy(&logits, 1);
        let h = 1e-6;
        for c in 0..3 {
            let mut plus = logits;
            plus[c] += h;
            let mut minus = logits;
            minus[c] -= h;
            let numeric =
                (softmax_cross_entropy(&plus, 1).0 - softmax_cross_entropy(&minus, 1).0)
                    / (2.0 * h);
            assert!((grad[c] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn mse_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = classifier_model(&mut rng, 4, 2, 2);
        let state = random_state(&mut rng, &[2; 4]);
        let out = match model_output(&model, &state).unwrap() {
            Output::Vector(v) => v,
            _ => unreachable!(),
        };
        let report = loss_mse(&model, &[state.clone()], &[out.clone()]).unwrap();
        assert!(report.value.abs() < 1e-15);

        // scalar case: prediction 1, target 0
        let unit = TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let unit_state = EmbeddedState::Product(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let report = loss_mse(&unit, &[unit_state], &[vec![0.0]]).unwrap();
        assert!((report.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reg_log_norm_values() {
        let unit = TensorTrain::from_product_state(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(reg_log_norm(&unit, RegKind::LogNorm).unwrap().abs() < 1e-12);
        assert!(reg_log_norm(&unit, RegKind::ReluLogNorm).unwrap().abs() < 1e-12);

        let shrunk = {
            let mut sites = unit.sites().to_vec();
            sites[0] = sites[0].clone().scale((-0.5f64).exp());
            TensorTrain::new(sites).unwrap()
        };
        assert!((reg_log_norm(&shrunk, RegKind::LogNorm).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(reg_log_norm(&shrunk, RegKind::ReluLogNorm).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 4, None, 3);
        let dense = to_dense(&model, None).unwrap();
        let expected = crate::tensor::frobenius_norm(&dense).powi(2).ln();
        assert!((reg_log_norm(&model, RegKind::LogNorm).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_check_log_quad_norm_smpo() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let model = random_model(
                &mut rng,
                4,
                Some(LowerSpec {
                    spacing: SpacingSpec::Uniform(2),
                    dim: 2,
                }),
                3,
            );
            let batch: Vec<EmbeddedState> =
                (0..3).map(|_| random_state(&mut rng, &[2; 4])).collect();
            check_gradients(
                &model,
                &batch,
                None,
                &LossSpec::new(PrimaryLoss::LogQuadNorm {
                    variant: LogQuadVariant::MinusOne,
                }),
            );
        }
    }

    #[test]
    fn gradient_check_log_quad_norm_scalar_mps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 4, None, 3);
        let batch: Vec<EmbeddedState> =
            (0..3).map(|_| random_state(&mut rng, &[2; 4])).collect();
        check_gradients(
            &model,
            &batch,
            None,
            &LossSpec::new(PrimaryLoss::LogQuadNorm {
                variant: LogQuadVariant::Plain,
            }),
        );
    }

    #[test]
    fn gradient_check_nll_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mps = random_model(&mut rng, 4, None, 3);
        let batch: Vec<EmbeddedState> =
            (0..2).map(|_| random_state(&mut rng, &[2; 4])).collect();
        check_gradients(&mps, &batch, None, &LossSpec::new(PrimaryLoss::NegLogLikelihood));

        let mpo = random_model(
            &mut rng,
            4,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(1),
                dim: 2,
            }),
            3,
        );
        check_gradients(&mpo, &batch, None, &LossSpec::new(PrimaryLoss::NegLogLikelihood));
    }

    #[test]
    fn gradient_check_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = classifier_model(&mut rng, 5, 3, 4);
        let batch: Vec<EmbeddedState> =
            (0..4).map(|_| random_state(&mut rng, &[2; 5])).collect();
        let labels = Targets::Classes(vec![0, 2, 1, 0]);
        check_gradients(
            &model,
            &batch,
            Some(&labels),
            &LossSpec::new(PrimaryLoss::CrossEntropySoftmax {
                reduction: Reduction::Mean,
            }),
        );
    }

    #[test]
    fn gradient_check_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = classifier_model(&mut rng, 4, 2, 3);
        let batch: Vec<EmbeddedState> =
            (0..3).map(|_| random_state(&mut rng, &[2; 4])).collect();
        let targets = Targets::Values(vec![vec![0.5, -0.3], vec![1.0, 0.0], vec![-0.2, 0.8]]);
        check_gradients(
            &model,
            &batch,
            Some(&targets),
            &LossSpec::new(PrimaryLoss::MeanSquaredError),
        );
    }

    #[test]
    fn gradient_check_with_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = random_model(
            &mut rng,
            4,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            3,
        );
        let batch: Vec<EmbeddedState> =
            (0..2).map(|_| random_state(&mut rng, &[2; 4])).collect();
        let spec = LossSpec {
            primary: PrimaryLoss::LogQuadNorm {
                variant: LogQuadVariant::MinusOne,
            },
            regularizers: vec![RegTerm {
                kind: RegKind::LogNorm,
                weight: 0.3,
            }],
        };
        check_gradients(&model, &batch, None, &spec);
    }

    #[test]
    fn zero_environment_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = classifier_model(&mut rng, 4, 2, 2);
        // zero local vector at feature 3 kills every environment that
        // includes it, i.e. the gradients of all other sites
        let state = EmbeddedState::Product(vec![
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            vec![0.3, 0.7],
            vec![0.0, 0.0],
        ]);
        let report = loss_mse(&model, &[state], &[vec![1.0, 1.0]]).unwrap();
        for (site, grad) in report.gradients.iter().enumerate() {
            if site != 3 {
                assert!(grad.data().iter().all(|&g| g == 0.0), "site {site}");
            }
        }
    }

    #[test]
    fn loss_invariant_under_canonicalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_model(
            &mut rng,
            5,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            3,
        );
        let batch: Vec<EmbeddedState> =
            (0..3).map(|_| random_state(&mut rng, &[2; 5])).collect();
        let spec = LossSpec::new(PrimaryLoss::LogQuadNorm {
            variant: LogQuadVariant::MinusOne,
        });
        let before = loss_value(&model, &batch, None, &spec).unwrap();
        let after = loss_value(
            &tt::canonicalize(&model, 2).unwrap(),
            &batch,
            None,
            &spec,
        )
        .unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn norm_losses_invariant_under_sign_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let model = random_model(
            &mut rng,
            4,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            3,
        );
        let flipped = {
            let mut sites = model.sites().to_vec();
            sites[0] = sites[0].clone().scale(-1.0);
            TensorTrain::new(sites).unwrap()
        };
        let batch: Vec<EmbeddedState> =
            (0..2).map(|_| random_state(&mut rng, &[2; 4])).collect();
        for spec in [
            LossSpec::new(PrimaryLoss::LogQuadNorm {
                variant: LogQuadVariant::MinusOne,
            }),
            LossSpec::new(PrimaryLoss::NegLogLikelihood),
        ] {
            let a = loss_value(&model, &batch, None, &spec).unwrap();
            let b = loss_value(&flipped, &batch, None, &spec).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_regularizer_is_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let model = random_model(
            &mut rng,
            4,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(2),
                dim: 2,
            }),
            3,
        );
        let batch: Vec<EmbeddedState> =
            (0..2).map(|_| random_state(&mut rng, &[2; 4])).collect();
        let bare = LossSpec::new(PrimaryLoss::LogQuadNorm {
            variant: LogQuadVariant::MinusOne,
        });
        let with_zero = LossSpec {
            regularizers: vec![RegTerm {
                kind: RegKind::LogNorm,
                weight: 0.0,
            }],
            ..bare.clone()
        };
        let a = gradient_engine(&model, &batch, None, &bare).unwrap();
        let b = gradient_engine(&model, &batch, None, &with_zero).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (x, y) in a.gradients.iter().zip(&b.gradients) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn finite_difference_trivial_cases() {
        // a 1-site "model": scalar overlap y = <site, state>, MSE to 0 is
        // quadratic in each entry
        let site = DenseTensor::from_data(vec![Index::new("in0", 2)], vec![1.0, 0.0]).unwrap();
        let model = TensorTrain::new(vec![site]).unwrap();
        let state = EmbeddedState::Product(vec![vec![1.0, 0.0]]);
        let spec = LossSpec::new(PrimaryLoss::MeanSquaredError);
        let targets = Targets::Values(vec![vec![0.0]]);
        let fd =
            finite_difference_gradient(&model, &[state], Some(&targets), &spec, 1e-5).unwrap();
        // y = w0, loss = w0^2, d/dw0 = 2 at w0 = 1; d/dw1 = 0
        assert!((fd[0].data()[0] - 2.0).abs() < 1e-9);
        assert!(fd[0].data()[1].abs() < 1e-9);
    }

    #[test]
    fn batch_mean_vs_sum_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let model = classifier_model(&mut rng, 4, 2, 3);
        let batch: Vec<EmbeddedState> =
            (0..4).map(|_| random_state(&mut rng, &[2; 4])).collect();
        let labels = vec![0, 1, 0, 1];
        let mean = loss_cross_entropy_softmax(&model, &batch, &labels, Reduction::Mean).unwrap();
        let sum = loss_cross_entropy_softmax(&model, &batch, &labels, Reduction::Sum).unwrap();
        assert!((sum.value - 4.0 * mean.value).abs() < 1e-10);
        assert!(mean.value >= 0.0);
    }

    #[test]
    fn engine_supports_entangled_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = random_model(
            &mut rng,
            3,
            Some(LowerSpec {
                spacing: SpacingSpec::Uniform(3),
                dim: 2,
            }),
            2,
        );
        let pixels: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let state = crate::embedding::embed_frqi(&pixels).unwrap();
        assert_eq!(state.n_sites(), 3);
        check_gradients(
            &model,
            &[state],
            None,
            &LossSpec::new(PrimaryLoss::LogQuadNorm {
                variant: LogQuadVariant::MinusOne,
            }),
        );
    }

    #[test]
    fn product_embedding_feeds_the_engine() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = classifier_model(&mut rng, 3, 2, 2);
        let maps = vec![LocalMap::Trigonometric { k: 1 }; 3];
        let state = embed_product_state(&[0.2, 0.7, 0.5], &maps).unwrap();
        let report =
            loss_cross_entropy_softmax(&model, &[state], &[1], Reduction::Mean).unwrap();
        assert!(report.value.is_finite());
        assert_eq!(report.gradients.len(), 3);
        for (grad, site) in report.gradients.iter().zip(model.sites()) {
            assert_eq!(grad.indices(), site.indices());
        }
    }
}
