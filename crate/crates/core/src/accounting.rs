//! Analytic parameter and FLOP counts, and a wall-clock throughput benchmark.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs; bias adds, residual
//! adds, scaling, masking and GELU cost 1 FLOP per element, softmax 3 and
//! LayerNorm 5. Embedding lookups are excluded, mirroring the parameter
//! convention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, LayerSpec, TokenBatch};
use crate::error::{Error, Result};
use crate::numkit::{Graph, Parameterized, Scalar};
use crate::pruning::verify_static;

const SOFTMAX_COST: u64 = 3;
const LAYER_NORM_COST: u64 = 5;

/// Counting conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Drop token/position tables and the embedding LayerNorm.
    pub exclude_embeddings: bool,
    /// Add a BERT-style pooler (`d×d` + bias, tanh) that the model itself
    /// does not have, so totals line up with the usual BERT-base figures.
    pub include_pooler: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            exclude_embeddings: true,
            include_pooler: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: u64,
    pub params_excluding_embeddings: u64,
    pub pooler_counted: bool,
    pub layers: Vec<LayerCost>,
    /// Classifier plus the optional pooler.
    pub head_params: u64,
    pub seq_len: usize,
    pub flops_per_example: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchResult>,
}

fn pooler_params(cfg: &EncoderConfig) -> u64 {
    let d = cfg.d as u64;
    d * d + d
}

fn pooler_flops(cfg: &EncoderConfig) -> u64 {
    let d = cfg.d as u64;
    2 * d * d + 2 * d
}

/// Exact scalar parameter count.
pub fn param_count<T: Scalar>(model: &Encoder<T>, opts: CountOptions) -> u64 {
    let mut n: u64 = model
        .parameters()
        .iter()
        .filter(|p| !(opts.exclude_embeddings && p.name().starts_with("embed.")))
        .map(|p| p.numel() as u64)
        .sum();
    if opts.include_pooler {
        n += pooler_params(&model.config);
    }
    n
}

/// `100·(1 − pruned/baseline)`.
pub fn param_reduction(baseline: u64, pruned: u64) -> f64 {
    100.0 * (1.0 - pruned as f64 / baseline as f64)
}

/// `100·pruned/baseline`.
pub fn flops_remaining(baseline: u64, pruned: u64) -> f64 {
    100.0 * pruned as f64 / baseline as f64
}

/// Closed-form parameter count of one standard layer.
pub fn standard_layer_params(cfg: &EncoderConfig) -> u64 {
    let (d, f) = (cfg.d as u64, cfg.d_ff as u64);
    4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
}

fn expert_params(cfg: &EncoderConfig) -> u64 {
    let (d, dh) = (cfg.d as u64, cfg.d_head() as u64);
    3 * (d * dh + dh)
}

fn shared_params(cfg: &EncoderConfig) -> u64 {
    let (d, dh) = (cfg.d as u64, cfg.d_head() as u64);
    // Expander (weight, bias, LayerNorm) plus the output LayerNorm.
    (d * dh + d + 2 * d) + 2 * d
}

/// Closed-form parameter count of a routed layer with `n` experts.
pub fn moe_layer_params(cfg: &EncoderConfig, n: usize) -> u64 {
    let (d, n) = (cfg.d as u64, n as u64);
    n * expert_params(cfg) + shared_params(cfg) + (d * n + n)
}

/// Closed-form parameter count of a pruned layer with `m` experts.
pub fn deterministic_layer_params(cfg: &EncoderConfig, m: usize) -> u64 {
    m as u64 * expert_params(cfg) + shared_params(cfg)
}

/// One single-head attention at width `w` with `heads` score matrices.
fn attention_flops(l: u64, w: u64, heads: u64) -> u64 {
    // QKᵀ, scale, mask, softmax, weighting.
    2 * l * l * w + heads * l * l * (2 + SOFTMAX_COST) + 2 * l * l * w
}

fn standard_flops(cfg: &EncoderConfig, l: u64) -> u64 {
    let (d, f, h) = (cfg.d as u64, cfg.d_ff as u64, cfg.h as u64);
    let proj = 4 * (2 * l * d * d + l * d);
    let ffn = (2 * l * d * f + l * f) + l * f + (2 * l * f * d + l * d);
    proj + attention_flops(l, d, h) + ffn + 2 * l * d + 2 * LAYER_NORM_COST * l * d
}

/// One expert head followed by the expander.
fn expert_path_flops(cfg: &EncoderConfig, l: u64) -> u64 {
    let (d, dh) = (cfg.d as u64, cfg.d_head() as u64);
    let head = 3 * (2 * l * d * dh + l * dh) + attention_flops(l, dh, 1);
    let expander = (2 * l * dh * d + l * d) + l * d + LAYER_NORM_COST * l * d;
    head + expander
}

/// `fan_out` expert paths, their mean, the residual and the output norm.
fn expert_layer_flops(cfg: &EncoderConfig, l: u64, fan_out: u64) -> u64 {
    let d = cfg.d as u64;
    let combine = if fan_out > 1 { fan_out * l * d } else { 0 };
    fan_out * expert_path_flops(cfg, l) + combine + l * d + LAYER_NORM_COST * l * d
}

fn layer_flops(cfg: &EncoderConfig, spec: &LayerSpec, l: u64) -> u64 {
    match spec {
        LayerSpec::Standard => standard_flops(cfg, l),
        LayerSpec::Moe { n_experts, k } => {
            let (d, n) = (cfg.d as u64, *n_experts as u64);
            2 * d * n + n + expert_layer_flops(cfg, l, *k as u64)
        }
        LayerSpec::Deterministic { retained } => expert_layer_flops(cfg, l, retained.len() as u64),
    }
}

/// Per-example FLOPs of the encoder stack and classification head.
pub fn flops_per_example<T: Scalar>(model: &Encoder<T>, seq_len: usize, opts: CountOptions) -> u64 {
    flops_for(&model.config, &model.layer_specs(), seq_len, opts)
}

pub fn flops_for(cfg: &EncoderConfig, specs: &[LayerSpec], seq_len: usize, opts: CountOptions) -> u64 {
    let l = seq_len as u64;
    let (d, c) = (cfg.d as u64, cfg.n_classes as u64);
    let stack: u64 = specs.iter().map(|s| layer_flops(cfg, s, l)).sum();
    let pooler = if opts.include_pooler { pooler_flops(cfg) } else { 0 };
    stack + 2 * d * c + c + pooler
}

pub fn cost_report<T: Scalar>(model: &Encoder<T>, seq_len: usize, opts: CountOptions) -> CostReport {
    let cfg = &model.config;
    let l = seq_len as u64;
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(index, layer)| {
            let spec = layer.spec();
            LayerCost {
                index,
                kind: spec.kind_name().to_string(),
                params: layer.params().iter().map(|p| p.numel() as u64).sum(),
                flops: layer_flops(cfg, &spec, l),
            }
        })
        .collect();
    let classifier: u64 = model.classifier.params().iter().map(|p| p.numel() as u64).sum();
    let pooler = if opts.include_pooler { pooler_params(cfg) } else { 0 };
    CostReport {
        params_total: param_count(
            model,
            CountOptions {
                exclude_embeddings: false,
                ..opts
            },
        ),
        params_excluding_embeddings: param_count(
            model,
            CountOptions {
                exclude_embeddings: true,
                ..opts
            },
        ),
        pooler_counted: opts.include_pooler,
        layers,
        head_params: classifier + pooler,
        seq_len,
        flops_per_example: flops_per_example(model, seq_len, opts),
        bench: None,
    }
}

/// A model's costs relative to a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub baseline: CostReport,
    pub model: CostReport,
    /// Over non-embedding parameters, in percent.
    pub param_reduction: f64,
    pub flops_remaining: f64,
}

pub fn compare(baseline: CostReport, model: CostReport) -> CostComparison {
    CostComparison {
        param_reduction: param_reduction(baseline.params_excluding_embeddings, model.params_excluding_embeddings),
        flops_remaining: flops_remaining(baseline.flops_per_example, model.flops_per_example),
        baseline,
        model,
    }
}

/// Layer kinds after converting and pruning the top `z` of `n_layers` to `m` experts.
pub fn pruned_layout(n_layers: usize, z: usize, m: usize) -> Vec<LayerSpec> {
    (0..n_layers)
        .map(|i| {
            if i + z >= n_layers {
                LayerSpec::Deterministic { retained: (0..m).collect() }
            } else {
                LayerSpec::Standard
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Allow benchmarking models that still route.
    pub routed: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            seq_len: 128,
            warmup_iters: 3,
            timed_iters: 20,
            routed: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub batch: usize,
    pub seq_len: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Median examples per second.
    pub throughput: f64,
    /// Median milliseconds per example.
    pub latency_ms: f64,
    pub iteration_seconds: Vec<f64>,
    pub threads: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times repeated forward passes over one fixed random batch.
pub fn bench<T: Scalar>(model: &Encoder<T>, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.timed_iters < 5 {
        return Err(Error::Statistics(format!(
            "need at least 5 timed iterations, got {}",
            cfg.timed_iters
        )));
    }
    if cfg.batch == 0 || cfg.seq_len == 0 {
        return Err(Error::Config("batch and seq_len must be positive".into()));
    }
    if !cfg.routed && !verify_static(model) {
        return Err(Error::Usage("model still routes; prune it or benchmark in routed mode".into()));
    }
    let vocab = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids = (0..cfg.batch * cfg.seq_len)
        .map(|i| if i % cfg.seq_len == 0 { 1 } else { rng.random_range(3..vocab) })
        .collect();
    let tokens = TokenBatch::unmasked(cfg.batch, cfg.seq_len, ids)?;

    let run = || -> Result<f64> {
        let start = Instant::now();
        let g = Graph::inference();
        let out = model.classify(&g, &tokens)?;
        std::hint::black_box(out.logits.value().data());
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.warmup_iters {
        run()?;
    }
    let mut secs = (0..cfg.timed_iters).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let iteration_seconds = secs.clone();
    let per_iter = median(&mut secs);
    Ok(BenchResult {
        batch: cfg.batch,
        seq_len: cfg.seq_len,
        warmup_iters: cfg.warmup_iters,
        timed_iters: cfg.timed_iters,
        throughput: cfg.batch as f64 / per_iter,
        latency_ms: 1e3 * per_iter / cfg.batch as f64,
        iteration_seconds,
        threads: 1,
    })
}
