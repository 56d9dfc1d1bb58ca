//! Progressive two-stage training: one layer converted per epoch with a
//! load-balancing term, then plain task training of the full routed model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{batches, eval_batches, Batch, Dataset};
use crate::encoder::{Encoder, Layer};
use crate::error::{Error, Result};
use crate::expert::convert_layer;
use crate::numkit::{Gradients, Graph, Parameter, Parameterized, Scalar, Tensor, Var};
use crate::usage::{collect_usage, frequencies, usage_entropy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of layers to convert, one per epoch (`Z`).
    pub target_modified_layers: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_ratio: 0.10,
            batch_size: 64,
            epochs: 8,
            target_modified_layers: 6,
            lambda: 0.1,
            epsilon: 1e-7,
            k: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", format!("must be positive, got {}", self.clip_norm));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad("warmup_ratio", format!("must lie in (0, 1), got {}", self.warmup_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.target_modified_layers > n_layers {
            return bad(
                "target_modified_layers",
                format!("{} exceeds the {n_layers} layers of the model", self.target_modified_layers),
            );
        }
        if self.target_modified_layers > self.epochs {
            return bad(
                "target_modified_layers",
                format!("{} conversions need at least as many epochs, got {}", self.target_modified_layers, self.epochs),
            );
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", format!("must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        if self.k == 0 || self.k > n_heads {
            return bad("k", format!("must lie in 1..={n_heads}, got {}", self.k));
        }
        Ok(())
    }
}

/// Where the progressive schedule stands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub current_modified_layers: usize,
    pub target_modified_layers: usize,
    pub epoch: usize,
    pub global_step: usize,
    /// `current_modified_layers < target_modified_layers`.
    pub balance_active: bool,
}

impl ScheduleState {
    pub fn new(target: usize) -> Self {
        Self {
            current_modified_layers: 0,
            target_modified_layers: target,
            epoch: 0,
            global_step: 0,
            balance_active: target > 0,
        }
    }

    fn refresh(&mut self) {
        self.balance_active = self.current_modified_layers < self.target_modified_layers;
    }
}

/// Batch-mean routing distribution `mean_b softmax(g_b)`, shape `(N,)`.
pub fn router_probs<T: Scalar>(g: &Graph<T>, gate_logits: &Var<T>) -> Result<Var<T>> {
    g.mean_axis0(&g.softmax_lastdim(gate_logits)?)
}

/// Symmetric smoothed KL between each `p` and the uniform prior, averaged
/// over layers:
/// `½·Σ(u+ε)(ln(u+ε) − ln(p+ε)) + ½·Σ(p+ε)(ln(p+ε) − ln(u+ε))`.
pub fn balance_loss<T: Scalar>(g: &Graph<T>, probs: &[Var<T>], epsilon: f64) -> Result<Var<T>> {
    if probs.is_empty() {
        return Err(Error::Usage("balance loss over zero layers".into()));
    }
    let half = T::lit(0.5);
    let mut total: Option<Var<T>> = None;
    for p in probs {
        if let Some(bad) = p.value().data().iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Domain(format!("routing probability {bad} is negative or NaN")));
        }
        let n = p.value().len();
        let ue = 1.0 / n as f64 + epsilon;
        let log_ue = ue.ln();
        let pe = g.add_scalar(p, T::lit(epsilon));
        let log_pe = g.log(&pe)?;
        // Σ(u+ε)(ln(u+ε) − ln(p+ε)) = (u+ε)·(N·ln(u+ε) − Σ ln(p+ε))
        let forward = g.add_scalar(&g.scale(&g.sum(&log_pe), T::lit(-ue)), T::lit(ue * n as f64 * log_ue));
        let reverse = g.sum(&g.mul(&pe, &g.add_scalar(&log_pe, T::lit(-log_ue)))?);
        let layer = g.scale(&g.add(&forward, &reverse)?, half);
        total = Some(match total {
            None => layer,
            Some(t) => g.add(&t, &layer)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(g.scale(&total, T::one() / T::lit(probs.len() as f64)))
}

/// Plain-number version of [`balance_loss`] for a single layer.
pub fn balance_loss_value(p: &[f64], epsilon: f64) -> Result<f64> {
    let g = Graph::<f64>::inference();
    let probs = g.constant(Tensor::new([p.len()], p.to_vec())?);
    balance_loss(&g, &[probs], epsilon)?.value().item()
}

/// `task + λ·balance` while the balance term is active, else `task` itself.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    task: &Var<T>,
    balance: Option<&Var<T>>,
    balance_active: bool,
    lambda: f64,
) -> Result<Var<T>> {
    match balance {
        Some(b) if balance_active && lambda != 0.0 => g.add(task, &g.scale(b, T::lit(lambda))),
        _ => Ok(task.clone()),
    }
}

/// Linear warmup over `ceil(warmup_ratio·total)` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    let warmup = ((warmup_ratio * total_steps as f64).ceil() as usize).clamp(1, total_steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if warmup == total_steps {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    t: i32,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
///
/// Moments are kept per parameter name. Parameters without a gradient in a
/// step are left alone, including their decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter<T>>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let shrink = T::lit(1.0 - lr * self.weight_decay);
        for p in params {
            let Some(grad) = grads.param(p.name()) else { continue };
            if grad.shape() != p.value().shape() {
                return Err(Error::shape("adamw", p.value().shape(), grad.shape()));
            }
            let st = self.state.entry(p.name().to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape().to_vec()),
                v: Tensor::zeros(grad.shape().to_vec()),
                t: 0,
            });
            st.t += 1;
            let c1 = T::lit(1.0 - self.beta1.powi(st.t));
            let c2 = T::lit(1.0 - self.beta2.powi(st.t));
            let step = T::lit(lr);
            let theta = p.value_mut().data_mut();
            for (((w, m), v), &gi) in theta
                .iter_mut()
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
                .zip(grad.data())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w * shrink - step * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm exceeds
/// `max_norm`. The norm is accumulated in the order of `params`. Returns the
/// factor applied.
pub fn clip_gradients<T: Scalar>(params: &[&Parameter<T>], grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = grads.param(p.name()) {
            sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in params {
        if let Some(g) = grads.param_mut(p.name()) {
            g.scale_in_place(T::lit(scale));
        }
    }
    Ok(scale)
}

/// Converts the deepest remaining standard layer. Returns its index, or
/// `None` when the target count is reached or nothing is left to convert.
pub fn convert_next_layer<T: Scalar>(
    model: &mut Encoder<T>,
    schedule: &mut ScheduleState,
    k: usize,
    seed: u64,
) -> Result<Option<usize>> {
    if schedule.current_modified_layers >= schedule.target_modified_layers {
        return Ok(None);
    }
    let Some(index) = model.layers.iter().rposition(|l| matches!(l, Layer::Standard(_))) else {
        return Ok(None);
    };
    let Layer::Standard(std_layer) = &model.layers[index] else { unreachable!() };
    let moe = convert_layer(index, std_layer, &model.config, k, seed)?;
    model.layers[index] = Layer::Moe(moe);
    schedule.current_modified_layers += 1;
    schedule.refresh();
    Ok(Some(index))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub balance_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsageSummary {
    pub layer: usize,
    pub frequencies: Vec<f64>,
    pub max_frequency: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 while layers are still being converted, 2 afterwards.
    pub stage: u8,
    pub converted_layer: Option<usize>,
    pub mean_task_loss: f64,
    /// Routing statistics on the evaluation split after this epoch.
    pub usage: Vec<LayerUsageSummary>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_loss: f64,
    pub schedule: ScheduleState,
}

/// Fraction of `dataset` classified correctly.
pub fn evaluate<T: Scalar>(model: &Encoder<T>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Statistics("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in eval_batches(dataset, batch_size)? {
        let pred = model.predict(&batch.tokens)?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Usage frequencies of every MoE layer on `dataset`.
pub fn usage_summary<T: Scalar>(model: &Encoder<T>, dataset: &Dataset, batch_size: usize) -> Result<Vec<LayerUsageSummary>> {
    let report = collect_usage(model, dataset, "eval", batch_size)?;
    report
        .layers
        .iter()
        .map(|r| {
            let f = frequencies(r, report.k)?;
            Ok(LayerUsageSummary {
                layer: r.layer,
                max_frequency: f.iter().cloned().fold(0.0, f64::max),
                entropy: usage_entropy(&f),
                frequencies: f,
            })
        })
        .collect()
}

/// Runs the full progressive schedule.
///
/// Epoch `e` (1-based) first converts one more layer while fewer than `Z`
/// are converted; such epochs form stage 1 and add `λ·L_balance`. Later
/// epochs train the routed model on the task loss alone. The learning rate
/// follows one warmup-plus-cosine schedule across all epochs. `on_step` sees
/// every log record as it is produced.
/// Loss terms of one batch.
pub struct BatchLoss<T> {
    pub task: Var<T>,
    /// Present when a balance weight was given and the model routes.
    pub balance: Option<Var<T>>,
    pub total: Var<T>,
}

/// Cross-entropy plus, when `balance = Some((λ, ε))`, the weighted balance term.
pub fn batch_loss<T: Scalar>(
    g: &Graph<T>,
    model: &Encoder<T>,
    batch: &Batch,
    balance: Option<(f64, f64)>,
) -> Result<BatchLoss<T>> {
    let out = model.classify(g, &batch.tokens)?;
    let task = g.cross_entropy(&out.logits, &batch.labels)?;
    let (balance, lambda) = match balance {
        Some((lambda, eps)) if !out.routing.is_empty() => {
            let probs = out
                .routing
                .iter()
                .map(|r| router_probs(g, &r.gate_logits))
                .collect::<Result<Vec<_>>>()?;
            (Some(balance_loss(g, &probs, eps)?), lambda)
        }
        _ => (None, 0.0),
    };
    let total = total_loss(g, &task, balance.as_ref(), balance.is_some(), lambda)?;
    Ok(BatchLoss { task, balance, total })
}

pub fn train<T: Scalar>(
    model: &mut Encoder<T>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate(model.config.n_layers, model.config.h)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train_set.n_classes > model.config.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            train_set.n_classes, model.config.n_classes
        )));
    }
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut schedule = ScheduleState::new(cfg.target_modified_layers);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut final_loss = f64::NAN;

    for epoch in 1..=cfg.epochs {
        schedule.epoch = epoch;
        let stage_one = schedule.balance_active;
        let converted_layer = convert_next_layer(model, &mut schedule, cfg.k, cfg.seed)?;
        let mut task_sum = 0.0;
        let mut seen = 0usize;

        for batch in batches(train_set, cfg.batch_size, cfg.seed, epoch as u64)? {
            schedule.global_step += 1;
            let step = schedule.global_step;
            let lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio);

            let g = Graph::new();
            let balance = (stage_one && cfg.lambda != 0.0).then_some((cfg.lambda, cfg.epsilon));
            let BatchLoss { task, balance, total: loss } = batch_loss(&g, model, &batch, balance).map_err(|e| match e {
                Error::Domain(msg) => Error::NonFinite(format!("step {step} (epoch {epoch}): {msg}")),
                e => e,
            })?;

            let record = StepRecord {
                step,
                epoch,
                lr,
                task_loss: task.value().item()?.as_f64(),
                balance_loss: match &balance {
                    Some(b) => Some(b.value().item()?.as_f64()),
                    None => None,
                },
                total_loss: loss.value().item()?.as_f64(),
            };
            if !record.total_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step} (epoch {epoch}): total loss is {}",
                    record.total_loss
                )));
            }
            let mut grads = g.backward(&loss)?;
            drop(g);
            clip_gradients(&model.parameters(), &mut grads, cfg.clip_norm)
                .map_err(|e| Error::NonFinite(format!("step {step} (epoch {epoch}): {e}")))?;
            opt.step(model.parameters_mut(), &grads, lr)?;

            task_sum += record.task_loss * batch.labels.len() as f64;
            seen += batch.labels.len();
            final_loss = record.total_loss;
            on_step(&record)?;
        }

        let eval = eval_set.unwrap_or(train_set);
        epochs.push(EpochRecord {
            epoch,
            stage: if stage_one { 1 } else { 2 },
            converted_layer,
            mean_task_loss: task_sum / seen as f64,
            usage: usage_summary(model, eval, cfg.batch_size)?,
            eval_accuracy: Some(evaluate(model, eval, cfg.batch_size)?),
        });
    }
    Ok(TrainReport {
        epochs,
        final_loss,
        schedule,
    })
}
