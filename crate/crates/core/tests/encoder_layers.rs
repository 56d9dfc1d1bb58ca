use headroute::encoder::{Encoder, EncoderConfig, Layer, StandardLayer, TokenBatch};
use headroute::nn::Init;
use headroute::numkit::{grad_check, Graph, Parameterized, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(n_layers: usize, h: usize) -> EncoderConfig {
    EncoderConfig {
        d: 8,
        h,
        n_layers,
        d_ff: 16,
        vocab_size: 20,
        max_len: 16,
        n_classes: 3,
        seed: 7,
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn std_layer(cfg: &EncoderConfig, seed: u64) -> StandardLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = StandardLayer::new(0, cfg, &mut Init::TruncNormal(&mut rng));
    // Larger weights make attention patterns non-trivial.
    for p in layer.params_mut().into_iter().filter(|p| p.name().ends_with("weight")) {
        let v = p.value().map(|x| x * 20.0);
        *p.value_mut() = v;
    }
    layer
}

#[test]
fn bert_base_preset() {
    let c = EncoderConfig::bert_base();
    assert_eq!((c.d, c.h, c.n_layers, c.d_ff, c.d_head()), (768, 12, 12, 3072, 64));
    c.validate().unwrap();
}

#[test]
fn config_rejects_indivisible_heads() {
    let mut c = toy(1, 2);
    c.h = 3;
    assert!(c.validate().is_err());
}

#[test]
fn embed_rejects_out_of_range_ids() {
    let m = Encoder::<f64>::new(toy(1, 2)).unwrap();
    let batch = TokenBatch::unmasked(1, 2, vec![1, 20]).unwrap();
    let err = m.embed(&Graph::inference(), &batch).unwrap_err();
    assert!(err.to_string().contains("20"));
}

#[test]
fn embed_is_deterministic_and_position_aware() {
    let a = Encoder::<f64>::new(toy(1, 2)).unwrap();
    let b = Encoder::<f64>::new(toy(1, 2)).unwrap();
    let batch = TokenBatch::unmasked(1, 3, vec![5, 5, 5]).unwrap();
    let ea = a.embed(&Graph::inference(), &batch).unwrap();
    let eb = b.embed(&Graph::inference(), &batch).unwrap();
    assert_eq!(ea.value(), eb.value());
    let v = ea.value();
    let rows: Vec<&[f64]> = v.data().chunks(8).collect();
    assert_ne!(rows[0], rows[1]);
    assert_ne!(rows[1], rows[2]);
}

/// Direct scalar-loop single-head attention plus `W^O`, residual and LayerNorm.
fn single_head_oracle(layer: &StandardLayer<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lin = |w: &Tensor<f64>, bias: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| bias.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
            .collect()
    };
    let mut out = Vec::new();
    for bi in 0..b {
        let rows: Vec<&[f64]> = (0..l).map(|t| &x.data()[(bi * l + t) * d..(bi * l + t + 1) * d]).collect();
        let q: Vec<_> = rows.iter().map(|r| lin(layer.wq.weight.value(), layer.wq.bias.value(), r)).collect();
        let k: Vec<_> = rows.iter().map(|r| lin(layer.wk.weight.value(), layer.wk.bias.value(), r)).collect();
        let v: Vec<_> = rows.iter().map(|r| lin(layer.wv.weight.value(), layer.wv.bias.value(), r)).collect();
        for t in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|u| (0..d).map(|c| q[t][c] * k[u][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            let ctx: Vec<f64> = (0..d)
                .map(|c| (0..l).map(|u| (s[u] - mx).exp() / z * v[u][c]).sum())
                .collect();
            let o = lin(layer.wo.weight.value(), layer.wo.bias.value(), &ctx);
            let r: Vec<f64> = o.iter().zip(rows[t]).map(|(a, b)| a + b).collect();
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            out.extend(r.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
        }
    }
    out
}

#[test]
fn single_head_mha_matches_loop_oracle() {
    let cfg = toy(1, 1);
    let layer = std_layer(&cfg, 3);
    let x = random_tensor(&[2, 4, 8], 11);
    let g = Graph::inference();
    let mask = g.constant(Tensor::zeros([2, 1, 4]));
    let got = layer.mha_forward(&g, &g.constant(x.clone()), &mask).unwrap();
    let want = single_head_oracle(&layer, &x);
    for (a, b) in got.value().data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn length_one_attention_passes_value_through() {
    let cfg = toy(1, 2);
    let mut layer = std_layer(&cfg, 4);
    // Identity W^O, zero bias: output = LN(V-projection + X).
    *layer.wo.weight.value_mut() = Tensor::eye(8);
    layer.wo.bias.value_mut().fill(0.0);
    let x = random_tensor(&[1, 1, 8], 5);
    let g = Graph::inference();
    let mask = g.constant(Tensor::zeros([1, 1, 1]));
    let xv = g.constant(x.clone());
    let got = layer.mha_forward(&g, &xv, &mask).unwrap();
    let v = layer.wv.forward(&g, &xv).unwrap();
    let want = layer.attn_norm.forward(&g, &g.add(&v, &xv).unwrap()).unwrap();
    assert_eq!(got.value(), want.value());
}

#[test]
fn mha_batch_permutation_equivariance() {
    let cfg = toy(1, 2);
    let layer = std_layer(&cfg, 8);
    let x = random_tensor(&[3, 4, 8], 9);
    let g = Graph::inference();
    let mask = g.constant(Tensor::zeros([3, 1, 4]));
    let out = layer.mha_forward(&g, &g.constant(x.clone()), &mask).unwrap();
    let perm = [2, 0, 1];
    let xp = g.gather_rows(&g.constant(x), &perm).unwrap();
    let outp = layer.mha_forward(&g, &xp, &mask).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        let a = outp.value().row(i).unwrap();
        let b = out.value().row(p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

#[test]
fn zero_ffn_reduces_to_norm_of_attention() {
    let cfg = toy(1, 2);
    let mut layer = std_layer(&cfg, 10);
    for lin in [&mut layer.ffn_in, &mut layer.ffn_out] {
        lin.weight.value_mut().fill(0.0);
        lin.bias.value_mut().fill(0.0);
    }
    let x = random_tensor(&[2, 3, 8], 12);
    let g = Graph::inference();
    let mask = g.constant(Tensor::zeros([2, 1, 3]));
    let xv = g.constant(x);
    let attn = layer.mha_forward(&g, &xv, &mask).unwrap();
    let full = layer.forward(&g, &xv, &mask).unwrap();
    let want = layer.ffn_norm.forward(&g, &attn).unwrap();
    assert_eq!(full.value(), want.value());
    assert_eq!(full.shape(), &[2, 3, 8]);
}

#[test]
fn standard_layer_gradient_check() {
    struct Wrap(StandardLayer<f64>);
    impl Parameterized<f64> for Wrap {
        fn parameters(&self) -> Vec<&headroute::numkit::Parameter<f64>> {
            self.0.params()
        }
        fn parameters_mut(&mut self) -> Vec<&mut headroute::numkit::Parameter<f64>> {
            self.0.params_mut()
        }
    }
    let cfg = EncoderConfig { d: 4, d_ff: 6, ..toy(1, 2) };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = Wrap(StandardLayer::new(0, &cfg, &mut Init::TruncNormal(&mut rng)));
    for p in w.0.params_mut() {
        let v = p.value().map(|x| x * 20.0 + 0.01);
        *p.value_mut() = v;
    }
    let x = random_tensor(&[2, 3, 4], 2);
    let weights = random_tensor(&[2, 3, 4], 3);
    let mut mask = Tensor::zeros([2, 1, 3]);
    mask.data_mut()[5] = -1e9;
    let report = grad_check(&mut w, 1e-6, |m, g| {
        let y = m.0.forward(g, &g.constant(x.clone()), &g.constant(mask.clone()))?;
        Ok(g.sum(&g.mul(&y, &g.constant(weights.clone()))?))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn classify_shapes_and_identical_rows() {
    let cfg = EncoderConfig { n_classes: 1, ..toy(2, 2) };
    let m = Encoder::<f64>::new(cfg).unwrap();
    let batch = TokenBatch::unmasked(2, 3, vec![1, 4, 5, 1, 4, 5]).unwrap();
    let out = m.classify(&Graph::inference(), &batch).unwrap();
    assert_eq!(out.logits.shape(), &[2, 1]);
    let d = out.logits.value().data();
    assert_eq!(d[0], d[1]);
}

#[test]
fn batch_independence_and_padding_invariance() {
    let m = Encoder::<f64>::new(toy(2, 2)).unwrap();
    let ids = vec![1, 4, 5, 6, 1, 9, 3, 0];
    let mask = vec![true, true, true, true, true, true, true, false];
    let batch = TokenBatch::new(2, 4, ids, mask).unwrap();
    let together = m.classify(&Graph::inference(), &batch).unwrap().logits.into_tensor();
    for b in 0..2 {
        let alone = m.classify(&Graph::inference(), &batch.row(b)).unwrap().logits.into_tensor();
        let diff = together.row(b).unwrap().max_abs_diff(&alone.row(0).unwrap()).unwrap();
        assert!(diff <= 1e-5);
    }
    let short = TokenBatch::unmasked(1, 3, vec![1, 9, 3]).unwrap();
    let padded = TokenBatch::new(1, 6, vec![1, 9, 3, 0, 0, 0], vec![true, true, true, false, false, false]).unwrap();
    let a = m.classify(&Graph::inference(), &short).unwrap().logits.into_tensor();
    let b = m.classify(&Graph::inference(), &padded).unwrap().logits.into_tensor();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
}

#[test]
fn cast_preserves_structure_and_values() {
    let m = Encoder::<f64>::new(toy(2, 2)).unwrap();
    let f: Encoder<f32> = m.cast();
    assert_eq!(f.parameters().len(), m.parameters().len());
    for (a, b) in f.parameters().iter().zip(m.parameters()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.value().data()[0] as f64, b.value().data()[0] as f32 as f64);
    }
    assert!(matches!(f.layers[0], Layer::Standard(_)));
}
