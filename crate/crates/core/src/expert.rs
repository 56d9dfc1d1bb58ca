//! Expert attention: independent single-head experts, a shared expander FFN,
//! a hard Top-k router on `[CLS]`, and the router-free pruned layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderConfig, StandardLayer};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear};
use crate::numkit::{Graph, Parameter, Scalar, Var};

/// One attention head with its own Q/K/V projections (`d → d_head`).
#[derive(Clone, Debug)]
pub struct ExpertHead<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
}

impl<T: Scalar> ExpertHead<T> {
    pub fn new(prefix: &str, d: usize, d_head: usize, init: &mut Init<'_>) -> Self {
        Self {
            wq: Linear::new(&format!("{prefix}.wq"), d, d_head, init),
            wk: Linear::new(&format!("{prefix}.wk"), d, d_head, init),
            wv: Linear::new(&format!("{prefix}.wv"), d, d_head, init),
        }
    }

    pub fn d_head(&self) -> usize {
        self.wq.d_out()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        [&self.wq, &self.wk, &self.wv].into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        [&mut self.wq, &mut self.wk, &mut self.wv]
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// Renames every parameter to live under `prefix`.
    pub(crate) fn rehome(&mut self, prefix: &str) {
        for (slot, lin) in [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)] {
            lin.weight.rename(format!("{prefix}.{slot}.weight"));
            lin.bias.rename(format!("{prefix}.{slot}.bias"));
        }
    }
}

/// `LayerNorm(GELU(W_exp·x + b_exp))`, lifting `d_head → d`.
#[derive(Clone, Debug)]
pub struct ExpanderFfn<T> {
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> ExpanderFfn<T> {
    pub fn new(prefix: &str, d_head: usize, d: usize, init: &mut Init<'_>) -> Self {
        Self {
            proj: Linear::new(&format!("{prefix}.proj"), d_head, d, init),
            norm: LayerNorm::new(&format!("{prefix}.norm"), d),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.proj.params().into();
        v.extend(self.norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.proj.params_mut().into();
        v.extend(self.norm.params_mut());
        v
    }
}

/// Linear scorer `d → N` applied to the `[CLS]` row.
#[derive(Clone, Debug)]
pub struct Router<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> Router<T> {
    pub fn n_experts(&self) -> usize {
        self.linear.d_out()
    }
}

/// Converted attention layer with `N` routed experts.
#[derive(Clone, Debug)]
pub struct MoeLayer<T> {
    pub experts: Vec<ExpertHead<T>>,
    pub expander: ExpanderFfn<T>,
    pub router: Router<T>,
    pub out_norm: LayerNorm<T>,
    pub k: usize,
}

/// Pruned layer: fixed experts, no router.
#[derive(Clone, Debug)]
pub struct DeterministicLayer<T> {
    pub experts: Vec<ExpertHead<T>>,
    pub expander: ExpanderFfn<T>,
    pub out_norm: LayerNorm<T>,
    /// Indices the retained experts had in the MoE layer they came from.
    pub source_experts: Vec<usize>,
}

/// Result of a routed forward pass.
pub struct MoeOutput<T> {
    pub hidden: Var<T>,
    pub gate_logits: Var<T>,
    /// Per batch row, the chosen experts ordered by descending score.
    pub selections: Vec<Vec<usize>>,
}

/// Single-head scaled dot-product attention, `(B, L, d) → (B, L, d_head)`.
///
/// `mask` is the additive key bias of shape `(B, 1, L)`.
pub fn head_forward<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    expert: &ExpertHead<T>,
    mask: &Var<T>,
) -> Result<Var<T>> {
    let q = expert.wq.forward(g, x)?;
    let k = expert.wk.forward(g, x)?;
    let v = expert.wv.forward(g, x)?;
    let scale = T::one() / T::lit(expert.d_head() as f64).sqrt();
    let scores = g.scale(&g.matmul(&q, &g.transpose_last2(&k)?)?, scale);
    let weights = g.softmax_lastdim(&g.add(&scores, mask)?)?;
    g.matmul(&weights, &v)
}

pub fn expander_forward<T: Scalar>(g: &Graph<T>, hx: &Var<T>, exp: &ExpanderFfn<T>) -> Result<Var<T>> {
    let lifted = exp.proj.forward(g, hx)?;
    exp.norm.forward(g, &g.gelu(&lifted))
}

/// Raw router logits `(B, N)` from position 0; no softmax.
pub fn gate_scores<T: Scalar>(g: &Graph<T>, x: &Var<T>, router: &Router<T>) -> Result<Var<T>> {
    let cls = g.index_axis(x, 1, 0)?;
    router.linear.forward(g, &cls)
}

/// The `k` best indices of each row, best first; ties go to the lower index.
pub fn select_top_k<T: Scalar>(scores: &[T], n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Usage(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
    }
    if n == 0 || !scores.len().is_multiple_of(n) {
        return Err(Error::shape("select_top_k", &[scores.len()], &[n]));
    }
    Ok(scores
        .chunks_exact(n)
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            // Stable sort keeps the lower index first among equal scores.
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(k);
            order
        })
        .collect())
}

/// `E` for every row: experts summed in index order, averaged when more
/// than one contributes.
fn combine_experts<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    mask: &Var<T>,
    experts: &[ExpertHead<T>],
    expander: &ExpanderFfn<T>,
    assignment: &BTreeMap<usize, Vec<usize>>,
    fan_out: usize,
) -> Result<Var<T>> {
    let batch = x.shape()[0];
    let mut total: Option<Var<T>> = None;
    for (&j, rows) in assignment {
        let all_rows = rows.len() == batch && rows.iter().enumerate().all(|(i, &r)| i == r);
        let (xs, ms) = if all_rows {
            (x.clone(), mask.clone())
        } else {
            (g.gather_rows(x, rows)?, g.gather_rows(mask, rows)?)
        };
        let e = expander_forward(g, &head_forward(g, &xs, &experts[j], &ms)?, expander)?;
        let e = if all_rows { e } else { g.scatter_rows(&e, rows, batch)? };
        total = Some(match total {
            None => e,
            Some(t) => g.add(&t, &e)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no expert selected".into()))?;
    Ok(if fan_out > 1 {
        g.scale(&total, T::one() / T::lit(fan_out as f64))
    } else {
        total
    })
}

impl<T: Scalar> MoeLayer<T> {
    /// Zero-valued layer with the right shapes, for loading checkpoints.
    pub fn zeros(index: usize, cfg: &EncoderConfig, n_experts: usize, k: usize) -> Result<Self> {
        if n_experts == 0 || k == 0 || k > n_experts {
            return Err(Error::Config(format!(
                "layer {index}: need 1 <= k <= N, got k = {k}, N = {n_experts}"
            )));
        }
        Ok(Self::fresh(index, cfg, n_experts, k, &mut Init::Zeros))
    }

    fn fresh(index: usize, cfg: &EncoderConfig, n: usize, k: usize, init: &mut Init<'_>) -> Self {
        let p = format!("layer.{index}");
        let d_head = cfg.d_head();
        let experts = (0..n)
            .map(|j| ExpertHead::new(&format!("{p}.expert.{j}"), cfg.d, d_head, init))
            .collect();
        Self {
            experts,
            expander: ExpanderFfn::new(&format!("{p}.expander"), d_head, cfg.d, init),
            router: Router {
                linear: Linear::new(&format!("{p}.router"), cfg.d, n, init),
            },
            out_norm: LayerNorm::new(&format!("{p}.out_norm"), cfg.d),
            k,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.experts.len() {
            return Err(Error::Usage(format!(
                "top-k needs 1 <= k <= {}, got k = {k}",
                self.experts.len()
            )));
        }
        self.k = k;
        Ok(())
    }

    /// Routes each row, runs only the selected experts, `Y = LN(E + X)`.
    pub fn forward(&self, g: &Graph<T>, x: &Var<T>, mask: &Var<T>) -> Result<MoeOutput<T>> {
        let gate_logits = gate_scores(g, x, &self.router)?;
        let selections = select_top_k(gate_logits.value().data(), self.n_experts(), self.k)?;
        let mut assignment: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, chosen) in selections.iter().enumerate() {
            for &j in chosen {
                assignment.entry(j).or_default().push(row);
            }
        }
        let e = combine_experts(g, x, mask, &self.experts, &self.expander, &assignment, self.k)?;
        let hidden = self.out_norm.forward(g, &g.add(&e, x)?)?;
        Ok(MoeOutput {
            hidden,
            gate_logits,
            selections,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.experts.iter().flat_map(|e| e.params()).collect();
        v.extend(self.expander.params());
        v.extend(self.router.linear.params());
        v.extend(self.out_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.experts.iter_mut().flat_map(|e| e.params_mut()).collect();
        v.extend(self.expander.params_mut());
        v.extend(self.router.linear.params_mut());
        v.extend(self.out_norm.params_mut());
        v
    }
}

impl<T: Scalar> DeterministicLayer<T> {
    pub fn zeros(index: usize, cfg: &EncoderConfig, source_experts: Vec<usize>) -> Result<Self> {
        if source_experts.is_empty() {
            return Err(Error::Config(format!("layer {index}: a pruned layer needs m >= 1")));
        }
        let p = format!("layer.{index}");
        let d_head = cfg.d_head();
        let mut init = Init::Zeros;
        let experts = (0..source_experts.len())
            .map(|j| ExpertHead::new(&format!("{p}.expert.{j}"), cfg.d, d_head, &mut init))
            .collect();
        Ok(Self {
            experts,
            expander: ExpanderFfn::new(&format!("{p}.expander"), d_head, cfg.d, &mut init),
            out_norm: LayerNorm::new(&format!("{p}.out_norm"), cfg.d),
            source_experts,
        })
    }

    /// Keeps `retained` (original indices, in the given order) from `moe`,
    /// renumbering them `0..m` and dropping the router.
    pub fn from_moe(index: usize, moe: &MoeLayer<T>, retained: &[usize]) -> Result<Self> {
        if retained.is_empty() {
            return Err(Error::Usage("cannot prune to zero experts".into()));
        }
        let p = format!("layer.{index}");
        let mut experts = Vec::with_capacity(retained.len());
        for (slot, &j) in retained.iter().enumerate() {
            let mut e = moe
                .experts
                .get(j)
                .ok_or(Error::Index {
                    what: "retained expert",
                    index: j,
                    bound: moe.experts.len(),
                })?
                .clone();
            e.rehome(&format!("{p}.expert.{slot}"));
            experts.push(e);
        }
        Ok(Self {
            experts,
            expander: moe.expander.clone(),
            out_norm: moe.out_norm.clone(),
            source_experts: retained.to_vec(),
        })
    }

    pub fn m(&self) -> usize {
        self.experts.len()
    }

    /// Every retained expert on every row; no router evaluation.
    pub fn forward(&self, g: &Graph<T>, x: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
        let all: Vec<usize> = (0..x.shape()[0]).collect();
        let assignment: BTreeMap<usize, Vec<usize>> = (0..self.m()).map(|j| (j, all.clone())).collect();
        let e = combine_experts(g, x, mask, &self.experts, &self.expander, &assignment, self.m())?;
        self.out_norm.forward(g, &g.add(&e, x)?)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<_> = self.experts.iter().flat_map(|e| e.params()).collect();
        v.extend(self.expander.params());
        v.extend(self.out_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.experts.iter_mut().flat_map(|e| e.params_mut()).collect();
        v.extend(self.expander.params_mut());
        v.extend(self.out_norm.params_mut());
        v
    }
}

/// Builds the routed counterpart of a standard layer.
///
/// Expert `i` takes columns `[i·d_head, (i+1)·d_head)` of `W^Q`, `W^K`, `W^V`
/// and their biases. Expander and router are freshly drawn from a stream
/// derived from `seed` and the layer index; `W^O` and the FFN are dropped.
pub fn convert_layer<T: Scalar>(
    index: usize,
    layer: &StandardLayer<T>,
    cfg: &EncoderConfig,
    k: usize,
    seed: u64,
) -> Result<MoeLayer<T>> {
    let h = cfg.h;
    if k == 0 || k > h {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {h}, got k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + index as u64);
    let mut init = Init::TruncNormal(&mut rng);
    let mut moe = MoeLayer::fresh(index, cfg, h, k, &mut init);
    let dh = cfg.d_head();
    for (i, expert) in moe.experts.iter_mut().enumerate() {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        for (dst, src) in [
            (&mut expert.wq, &layer.wq),
            (&mut expert.wk, &layer.wk),
            (&mut expert.wv, &layer.wv),
        ] {
            *dst.weight.value_mut() = src.weight.value().column_slice(lo, hi)?;
            *dst.bias.value_mut() = src.bias.value().range_slice(lo, hi)?;
        }
    }
    Ok(moe)
}
