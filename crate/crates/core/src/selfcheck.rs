//! Finite-difference checks of every differentiable op and of the full
//! routed-model loss, run by `headroute gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::encoder::{Encoder, EncoderConfig, TokenBatch};
use crate::error::Result;
use crate::numkit::{grad_check, GradCheckReport, Graph, ParamSet, Parameter, Parameterized, Tensor, Var};
use crate::training::{batch_loss, convert_next_layer, ScheduleState};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Gate-score gap kept clear of a routing switch by any ±h step.
const MIN_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub elements: usize,
    pub worst: Option<(String, usize)>,
}

impl CheckOutcome {
    fn new(name: &str, report: GradCheckReport, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            tolerance,
            elements: report.elements_checked,
            worst: report.worst,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

type OpFn = Box<dyn Fn(&ParamSet<f64>, &Graph<f64>) -> Result<Var<f64>>>;

/// Sum of `v ⊙ w`: a random linear read-out turning any op output into a scalar.
fn readout(g: &Graph<f64>, v: &Var<f64>, w: &Tensor<f64>) -> Result<Var<f64>> {
    Ok(g.sum(&g.mul(v, &g.constant(w.clone()))?))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let mut w = |shape: &[usize]| random(shape, rng);
    let (w234, w24, w34, w4, w54) = (w(&[2, 3, 4]), w(&[2, 4]), w(&[3, 4]), w(&[4]), w(&[5, 4]));
    let (w232, w222, w423, w26) = (w(&[2, 3, 2]), w(&[2, 2, 2]), w(&[4, 2, 3]), w(&[2, 6]));
    macro_rules! case {
        ($name:expr, $shapes:expr, $wt:ident, |$p:ident, $g:ident| $body:expr) => {{
            let $wt = $wt.clone();
            let f: OpFn = Box::new(move |$p, $g| readout($g, &$body, &$wt));
            ($name, $shapes, f)
        }};
    }
    vec![
        case!("matmul", vec![vec![2, 3, 4], vec![4, 2]], w232, |p, g| g.matmul(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("matmul_batched", vec![vec![2, 2, 3], vec![2, 3, 2]], w222, |p, g| g.matmul(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("add", vec![vec![2, 3, 4], vec![4]], w234, |p, g| g.add(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("add_mid_broadcast", vec![vec![2, 3, 4], vec![2, 1, 4]], w234, |p, g| g.add(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("sub", vec![vec![3, 4], vec![3, 4]], w34, |p, g| g.sub(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("mul", vec![vec![2, 3, 4], vec![3, 1]], w234, |p, g| g.mul(&g.param(&p[0]), &g.param(&p[1]))?),
        case!("scale_add_scalar", vec![vec![3, 4]], w34, |p, g| g.add_scalar(&g.scale(&g.param(&p[0]), -1.7), 0.3)),
        case!("log", vec![vec![3, 4]], w34, |p, g| {
            let x = g.param(&p[0]);
            g.log(&g.add_scalar(&g.mul(&x, &x)?, 0.5))?
        }),
        case!("softmax", vec![vec![2, 3, 4]], w234, |p, g| g.softmax_lastdim(&g.param(&p[0]))?),
        case!("gelu", vec![vec![2, 3, 4]], w234, |p, g| g.gelu(&g.scale(&g.param(&p[0]), 2.0))),
        case!("layer_norm", vec![vec![2, 3, 4], vec![4], vec![4]], w234, |p, g| {
            g.layer_norm(&g.param(&p[0]), &g.param(&p[1]), &g.param(&p[2]), 1e-5)?
        }),
        case!("permute", vec![vec![2, 3, 4]], w423, |p, g| g.permute(&g.param(&p[0]), &[2, 0, 1])?),
        case!("transpose_reshape", vec![vec![3, 4]], w26, |p, g| {
            g.reshape(&g.transpose_last2(&g.param(&p[0]))?, &[2, 6])?
        }),
        case!("index_axis", vec![vec![2, 3, 4]], w24, |p, g| g.index_axis(&g.param(&p[0]), 1, 2)?),
        case!("gather_scatter", vec![vec![3, 4]], w54, |p, g| {
            let rows = g.gather_rows(&g.param(&p[0]), &[2, 0, 2])?;
            g.scatter_rows(&rows, &[4, 1, 1], 5)?
        }),
        case!("mean_axis0", vec![vec![3, 4]], w4, |p, g| g.mean_axis0(&g.param(&p[0]))?),
        (
            "cross_entropy",
            vec![vec![4, 3]],
            Box::new(|p: &ParamSet<f64>, g: &Graph<f64>| g.cross_entropy(&g.scale(&g.param(&p[0]), 3.0), &[0, 2, 1, 2])),
        ),
    ]
}

/// Every differentiable primitive on small random inputs.
pub fn op_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = op_cases(&mut rng);
    cases
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut params = ParamSet(
                shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Parameter::new(format!("{name}.{i}"), random(s, &mut rng)))
                    .collect(),
            );
            let report = grad_check(&mut params, STEP, |p, g| f(p, g))?;
            Ok(CheckOutcome::new(name, report, OP_TOLERANCE))
        })
        .collect()
}

/// Two-layer model whose top layer is routed with `k = 1`.
pub fn model_check_setup(seed: u64) -> Result<(Encoder<f64>, Batch, f64, f64)> {
    let cfg = EncoderConfig {
        d: 16,
        h: 4,
        n_layers: 2,
        d_ff: 32,
        vocab_size: 12,
        max_len: 6,
        n_classes: 3,
        seed,
    };
    let mut model = Encoder::<f64>::new(cfg)?;
    convert_next_layer(&mut model, &mut ScheduleState::new(1), 1, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Initial-scale weights leave attention almost uniform, so the query/key
    // gradients sit near 1e-8 where central differences are round-off.
    // Random weights of unit scale give every entry a measurable slope.
    for p in model.parameters_mut().into_iter().filter(|p| p.name().ends_with("weight") || p.name() == "classifier") {
        let shape = p.value().shape().to_vec();
        let scale = 1.0 / (shape[0] as f64).sqrt();
        *p.value_mut() = random(&shape, &mut rng).map(|v| v * scale);
    }
    // Hard routing is discontinuous: inputs whose top two gate scores nearly
    // tie would switch experts under a ±h step, so such batches are redrawn.
    loop {
        let ids = (0..12).map(|i| if i % 6 == 0 { 1 } else { rng.random_range(3..12) }).collect();
        let mut mask = vec![true; 12];
        mask[11] = false;
        let batch = Batch {
            tokens: TokenBatch::new(2, 6, ids, mask)?,
            labels: vec![2, 0],
        };
        if routing_margin(&model, &batch)? >= MIN_MARGIN {
            return Ok((model, batch, 0.1, 1e-7));
        }
    }
}

/// Smallest gap between the best and second-best gate score over all rows.
pub fn routing_margin(model: &Encoder<f64>, batch: &Batch) -> Result<f64> {
    let out = model.classify(&Graph::inference(), &batch.tokens)?;
    let mut margin = f64::INFINITY;
    for trace in &out.routing {
        let scores = trace.gate_logits.value();
        let n = scores.last_dim();
        for row in scores.data().chunks(n) {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(sorted[0] - sorted[1]);
        }
    }
    Ok(margin)
}

/// The model minus its key biases. A key bias adds the same amount to every
/// score of a query, which the softmax cancels, so its exact gradient is zero
/// and a central difference returns only round-off.
pub struct WithoutKeyBias(pub Encoder<f64>);

fn is_key_bias(name: &str) -> bool {
    name.ends_with(".wk.bias")
}

impl Parameterized<f64> for WithoutKeyBias {
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        self.0.parameters().into_iter().filter(|p| !is_key_bias(p.name())).collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.0.parameters_mut().into_iter().filter(|p| !is_key_bias(p.name())).collect()
    }
}

/// Classifier cross-entropy plus `λ·balance` through one standard and one
/// routed layer, at `B = 2`, `L = 6`, `d = 16`, `h = 4`.
pub fn model_check(seed: u64) -> Result<CheckOutcome> {
    let (model, batch, lambda, eps) = model_check_setup(seed)?;
    let mut probe = WithoutKeyBias(model);
    let report = grad_check(&mut probe, STEP, |m, g| Ok(batch_loss(g, &m.0, &batch, Some((lambda, eps)))?.total))?;
    Ok(CheckOutcome::new("model_loss", report, MODEL_TOLERANCE))
}
