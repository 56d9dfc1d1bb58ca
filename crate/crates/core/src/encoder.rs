//! Baseline transformer encoder: embeddings, standard multi-head attention
//! layers, and a classifier reading the `[CLS]` position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{DeterministicLayer, MoeLayer};
use crate::nn::{Init, LayerNorm, Linear};
use crate::numkit::{Graph, Parameter, Parameterized, Scalar, Tensor, Var, MASK_BIAS};

/// Shape of an encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub h: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    /// BERT-base dimensions (d=768, h=12, 12 layers, d_ff=3072).
    pub fn bert_base() -> Self {
        Self {
            d: 768,
            h: 12,
            n_layers: 12,
            d_ff: 3072,
            vocab_size: 30522,
            max_len: 512,
            n_classes: 2,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d / self.h
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.h == 0 || !self.d.is_multiple_of(self.h) {
            return fail(format!("d ({}) must be a positive multiple of h ({})", self.d, self.h));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} leaves no room past the reserved ids", self.vocab_size));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.n_classes == 0 {
            return fail("n_classes must be positive".into());
        }
        Ok(())
    }
}

/// Token ids plus padding mask for a batch of equally long sequences.
///
/// Position 0 of every sequence is the `[CLS]` token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq_len: usize, ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != batch * seq_len || mask.len() != ids.len() {
            return Err(Error::shape("token batch", &[batch, seq_len], &[ids.len(), mask.len()]));
        }
        Ok(Self { batch, seq_len, ids, mask })
    }

    /// A batch with every position unmasked.
    pub fn unmasked(batch: usize, seq_len: usize, ids: Vec<usize>) -> Result<Self> {
        let mask = vec![true; ids.len()];
        Self::new(batch, seq_len, ids, mask)
    }

    /// Additive key bias of shape `(B, 1, L)`.
    pub fn mask_bias<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .mask
            .iter()
            .map(|&m| if m { T::zero() } else { T::lit(MASK_BIAS) })
            .collect();
        Tensor::new([self.batch, 1, self.seq_len], data).expect("sized")
    }

    pub fn row(&self, b: usize) -> TokenBatch {
        let span = b * self.seq_len..(b + 1) * self.seq_len;
        TokenBatch {
            batch: 1,
            seq_len: self.seq_len,
            ids: self.ids[span.clone()].to_vec(),
            mask: self.mask[span].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding<T> {
    pub tokens: Parameter<T>,
    pub positions: Parameter<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Embedding<T> {
    fn new(cfg: &EncoderConfig, init: &mut Init<'_>) -> Self {
        Self {
            tokens: Parameter::new("embed.tokens", init.weight(&[cfg.vocab_size, cfg.d])),
            positions: Parameter::new("embed.positions", init.weight(&[cfg.max_len, cfg.d])),
            norm: LayerNorm::new("embed.norm", cfg.d),
        }
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.tokens, &self.positions];
        v.extend(self.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.tokens, &mut self.positions];
        v.extend(self.norm.params_mut());
        v
    }
}

/// A plain encoder layer: joint multi-head attention, then the two-matrix FFN.
#[derive(Clone, Debug)]
pub struct StandardLayer<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
    pub h: usize,
}

impl<T: Scalar> StandardLayer<T> {
    pub fn new(index: usize, cfg: &EncoderConfig, init: &mut Init<'_>) -> Self {
        let p = format!("layer.{index}");
        Self {
            wq: Linear::new(&format!("{p}.attn.wq"), cfg.d, cfg.d, init),
            wk: Linear::new(&format!("{p}.attn.wk"), cfg.d, cfg.d, init),
            wv: Linear::new(&format!("{p}.attn.wv"), cfg.d, cfg.d, init),
            wo: Linear::new(&format!("{p}.attn.wo"), cfg.d, cfg.d, init),
            attn_norm: LayerNorm::new(&format!("{p}.attn.norm"), cfg.d),
            ffn_in: Linear::new(&format!("{p}.ffn.in"), cfg.d, cfg.d_ff, init),
            ffn_out: Linear::new(&format!("{p}.ffn.out"), cfg.d_ff, cfg.d, init),
            ffn_norm: LayerNorm::new(&format!("{p}.ffn.norm"), cfg.d),
            h: cfg.h,
        }
    }

    /// Joint h-head attention, `W^O` projection, residual and LayerNorm.
    pub fn mha_forward(&self, g: &Graph<T>, x: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
        let &[b, l, d] = x.shape() else {
            return Err(Error::shape("mha_forward", x.shape(), &[0, 0, 0]));
        };
        let h = self.h;
        let dh = d / h;
        let split = |v: Var<T>, axes: &[usize]| -> Result<Var<T>> {
            let v = g.reshape(&v, &[b, l, h, dh])?;
            g.permute(&v, axes)
        };
        let q = split(self.wq.forward(g, x)?, &[0, 2, 1, 3])?; // (B, h, L, dh)
        let kt = split(self.wk.forward(g, x)?, &[0, 2, 3, 1])?; // (B, h, dh, L)
        let v = split(self.wv.forward(g, x)?, &[0, 2, 1, 3])?;
        let scores = g.scale(&g.matmul(&q, &kt)?, T::one() / T::lit(dh as f64).sqrt());
        let key_bias = g.reshape(mask, &[b, 1, 1, l])?;
        let weights = g.softmax_lastdim(&g.add(&scores, &key_bias)?)?;
        let ctx = g.permute(&g.matmul(&weights, &v)?, &[0, 2, 1, 3])?;
        let ctx = g.reshape(&ctx, &[b, l, d])?;
        let attn = self.wo.forward(g, &ctx)?;
        self.attn_norm.forward(g, &g.add(&attn, x)?)
    }

    /// Attention sublayer followed by `LN(W₂·GELU(W₁·x) + x)`.
    pub fn forward(&self, g: &Graph<T>, x: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
        let hidden = self.mha_forward(g, x, mask)?;
        let inner = g.gelu(&self.ffn_in.forward(g, &hidden)?);
        let ffn = self.ffn_out.forward(g, &inner)?;
        self.ffn_norm.forward(g, &g.add(&ffn, &hidden)?)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = Vec::with_capacity(16);
        for lin in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(lin.params());
        }
        v.extend(self.attn_norm.params());
        v.extend(self.ffn_in.params());
        v.extend(self.ffn_out.params());
        v.extend(self.ffn_norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = Vec::with_capacity(16);
        for lin in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            v.extend(lin.params_mut());
        }
        v.extend(self.attn_norm.params_mut());
        v.extend(self.ffn_in.params_mut());
        v.extend(self.ffn_out.params_mut());
        v.extend(self.ffn_norm.params_mut());
        v
    }
}

/// Structural description of one layer, enough to rebuild a zeroed skeleton.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Standard,
    Moe { n_experts: usize, k: usize },
    Deterministic { retained: Vec<usize> },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Standard => "standard",
            LayerSpec::Moe { .. } => "moe",
            LayerSpec::Deterministic { .. } => "deterministic",
        }
    }
}

/// Any layer of the stack; all map `(B, L, d) → (B, L, d)`.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Standard(StandardLayer<T>),
    Moe(MoeLayer<T>),
    Deterministic(DeterministicLayer<T>),
}

/// Routing decisions a MoE layer made during one forward pass.
#[derive(Clone, Debug)]
pub struct RoutingTrace<T> {
    pub layer: usize,
    /// Raw router scores, `(B, N)`, still attached to the graph.
    pub gate_logits: Var<T>,
    /// Selected expert indices per batch row, best first.
    pub selections: Vec<Vec<usize>>,
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Standard(_) => LayerSpec::Standard,
            Layer::Moe(m) => LayerSpec::Moe {
                n_experts: m.experts.len(),
                k: m.k,
            },
            Layer::Deterministic(dl) => LayerSpec::Deterministic {
                retained: dl.source_experts.clone(),
            },
        }
    }

    pub fn forward(
        &self,
        g: &Graph<T>,
        x: &Var<T>,
        mask: &Var<T>,
    ) -> Result<(Var<T>, Option<(Var<T>, Vec<Vec<usize>>)>)> {
        match self {
            Layer::Standard(l) => Ok((l.forward(g, x, mask)?, None)),
            Layer::Moe(l) => {
                let out = l.forward(g, x, mask)?;
                Ok((out.hidden, Some((out.gate_logits, out.selections))))
            }
            Layer::Deterministic(l) => Ok((l.forward(g, x, mask)?, None)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Layer::Standard(l) => l.params(),
            Layer::Moe(l) => l.params(),
            Layer::Deterministic(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Layer::Standard(l) => l.params_mut(),
            Layer::Moe(l) => l.params_mut(),
            Layer::Deterministic(l) => l.params_mut(),
        }
    }
}

/// Output of a full forward pass.
pub struct Encoded<T> {
    pub hidden: Var<T>,
    pub routing: Vec<RoutingTrace<T>>,
}

pub struct Classified<T> {
    pub logits: Var<T>,
    pub routing: Vec<RoutingTrace<T>>,
}

/// Embeddings, a stack of layers, and a `[CLS]` classifier.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub embedding: Embedding<T>,
    pub layers: Vec<Layer<T>>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> Encoder<T> {
    /// A freshly initialized all-standard encoder, deterministic in `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::TruncNormal(&mut rng);
        Ok(Self::build(config, &mut init))
    }

    fn build(config: EncoderConfig, init: &mut Init<'_>) -> Self {
        let embedding = Embedding::new(&config, init);
        let layers = (0..config.n_layers)
            .map(|i| Layer::Standard(StandardLayer::new(i, &config, init)))
            .collect();
        let classifier = Linear::new("classifier", config.d, config.n_classes, init);
        Self {
            config,
            embedding,
            layers,
            classifier,
        }
    }

    /// A zero-valued model with the given layer structure.
    pub fn skeleton(config: EncoderConfig, specs: &[LayerSpec]) -> Result<Self> {
        config.validate()?;
        if specs.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layer specs for a {}-layer config",
                specs.len(),
                config.n_layers
            )));
        }
        let mut model = Self::build(config, &mut Init::Zeros);
        for (i, spec) in specs.iter().enumerate() {
            model.layers[i] = match spec {
                LayerSpec::Standard => continue,
                LayerSpec::Moe { n_experts, k } => {
                    Layer::Moe(MoeLayer::zeros(i, &model.config, *n_experts, *k)?)
                }
                LayerSpec::Deterministic { retained } => {
                    Layer::Deterministic(DeterministicLayer::zeros(i, &model.config, retained.clone())?)
                }
            };
        }
        Ok(model)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn count_moe_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Moe(_))).count()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        let mut out = Encoder::<U>::skeleton(self.config.clone(), &self.layer_specs())
            .expect("structure of an existing model is valid");
        for (dst, src) in out.parameters_mut().into_iter().zip(self.parameters()) {
            debug_assert_eq!(dst.name(), src.name());
            *dst.value_mut() = src.value().cast();
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Token plus position embeddings, then LayerNorm.
    pub fn embed(&self, g: &Graph<T>, tokens: &TokenBatch) -> Result<Var<T>> {
        let cfg = &self.config;
        if tokens.seq_len > cfg.max_len {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.seq_len,
                bound: cfg.max_len,
            });
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        let table = g.param(&self.embedding.tokens);
        let tok = g.gather_rows(&table, &tokens.ids)?;
        let tok = g.reshape(&tok, &[tokens.batch, tokens.seq_len, cfg.d])?;
        let positions: Vec<usize> = (0..tokens.seq_len).collect();
        let pos = g.gather_rows(&g.param(&self.embedding.positions), &positions)?;
        let sum = g.add(&tok, &pos)?;
        self.embedding.norm.forward(g, &sum)
    }

    /// Embeddings followed by every layer in order.
    pub fn encode(&self, g: &Graph<T>, tokens: &TokenBatch) -> Result<Encoded<T>> {
        let mask = g.constant(tokens.mask_bias());
        let mut hidden = self.embed(g, tokens)?;
        let mut routing = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, trace) = layer.forward(g, &hidden, &mask)?;
            if let Some((gate_logits, selections)) = trace {
                routing.push(RoutingTrace {
                    layer: i,
                    gate_logits,
                    selections,
                });
            }
            hidden = next;
        }
        Ok(Encoded { hidden, routing })
    }

    /// Class logits `(B, n_classes)` from the final hidden state at position 0.
    pub fn classify(&self, g: &Graph<T>, tokens: &TokenBatch) -> Result<Classified<T>> {
        let enc = self.encode(g, tokens)?;
        let cls = g.index_axis(&enc.hidden, 1, 0)?;
        let logits = self.classifier.forward(g, &cls)?;
        Ok(Classified {
            logits,
            routing: enc.routing,
        })
    }

    /// Argmax class per sequence, without recording.
    pub fn predict(&self, tokens: &TokenBatch) -> Result<Vec<usize>> {
        let g = Graph::inference();
        let out = self.classify(&g, tokens)?;
        let c = self.config.n_classes;
        Ok(out
            .logits
            .value()
            .data()
            .chunks_exact(c)
            .map(|row| argmax(row))
            .collect())
    }
}

/// Index of the largest value, ties toward the lowest index.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.embedding.params();
        for layer in &self.layers {
            v.extend(layer.params());
        }
        v.extend(self.classifier.params());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.embedding.params_mut();
        for layer in &mut self.layers {
            v.extend(layer.params_mut());
        }
        v.extend(self.classifier.params_mut());
        v
    }
}
