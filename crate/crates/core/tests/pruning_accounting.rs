use headroute::accounting::{
    bench, cost_report, deterministic_layer_params, flops_for, flops_per_example, flops_remaining,
    moe_layer_params, param_count, param_reduction, standard_layer_params, BenchConfig, CountOptions,
};
use headroute::encoder::{Encoder, EncoderConfig, Layer, LayerSpec, TokenBatch};
use headroute::expert::MoeLayer;
use headroute::numkit::{Graph, Parameterized, Tensor};
use headroute::pruning::{prune_layer, prune_model, select_retained, verify_static};
use headroute::training::{convert_next_layer, ScheduleState};
use headroute::usage::{UsageRecord, UsageReport};
use headroute::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> EncoderConfig {
    EncoderConfig {
        d: 16,
        h: 4,
        n_layers: 3,
        d_ff: 32,
        vocab_size: 30,
        max_len: 8,
        n_classes: 2,
        seed: 2,
    }
}

fn report(k: usize, layers: &[(usize, Vec<u64>)]) -> UsageReport {
    UsageReport {
        k,
        dataset: "test".into(),
        layers: layers
            .iter()
            .map(|(layer, counts)| UsageRecord {
                layer: *layer,
                total: counts.iter().sum::<u64>() / k as u64,
                counts: counts.clone(),
            })
            .collect(),
    }
}

fn converted(cfg: EncoderConfig, z: usize) -> Encoder<f64> {
    let mut m = Encoder::<f64>::new(cfg).unwrap();
    let mut s = ScheduleState::new(z);
    for _ in 0..z {
        convert_next_layer(&mut m, &mut s, 1, 9).unwrap();
    }
    m
}

#[test]
fn select_retained_examples() {
    let r = report(1, &[(0, vec![5, 90, 5])]);
    assert_eq!(select_retained(&r, 0, 1).unwrap(), vec![1]);
    assert_eq!(select_retained(&r, 0, 3).unwrap().len(), 3);
    let r = report(1, &[(0, vec![40, 40, 20])]);
    assert_eq!(select_retained(&r, 0, 2).unwrap(), vec![0, 1]);
    assert!(matches!(select_retained(&r, 0, 0), Err(Error::Usage(_))));
    assert!(matches!(select_retained(&r, 0, 4), Err(Error::Usage(_))));
    assert!(matches!(select_retained(&r, 1, 1), Err(Error::Contract(_))));
}

#[test]
fn prune_model_structure() {
    let m = converted(toy(), 2);
    let r = report(1, &[(1, vec![1, 0, 7, 2]), (2, vec![3, 3, 3, 1])]);
    let (p, manifest) = prune_model(&m, &r, 1).unwrap();
    assert!(verify_static(&p));
    assert!(!verify_static(&m));
    assert!(p.parameters().iter().all(|t| !t.name().contains("router")));
    assert_eq!(manifest.retained.get(&1), Some(&vec![2]));
    assert_eq!(manifest.retained.get(&2), Some(&vec![0]));
    let Layer::Deterministic(dl) = &p.layers[1] else { panic!() };
    let Layer::Moe(ml) = &m.layers[1] else { panic!() };
    // Retained tensors are copied bitwise.
    assert_eq!(dl.experts[0].wk.weight.value(), ml.experts[2].wk.weight.value());
    assert_eq!(dl.expander.proj.weight.value(), ml.expander.proj.weight.value());
    assert_eq!(dl.out_norm.gamma.value(), ml.out_norm.gamma.value());
    // Standard layers untouched.
    assert!(matches!(p.layers[0], Layer::Standard(_)));

    let plain = Encoder::<f64>::new(toy()).unwrap();
    let (same, manifest) = prune_model(&plain, &report(1, &[]), 1).unwrap();
    assert!(manifest.retained.is_empty() && verify_static(&same));
    assert!(matches!(prune_model(&m, &report(1, &[(2, vec![1, 0, 0, 0])]), 1), Err(Error::Contract(_))));
}

fn random_x(b: usize, l: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new([b, l, d], (0..b * l * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn full_retention_matches_tied_full_fan_out() {
    let cfg = toy();
    let m = converted(cfg.clone(), 1);
    let Layer::Moe(moe) = &m.layers[2] else { panic!() };
    let mut tied: MoeLayer<f64> = moe.clone();
    tied.set_k(4).unwrap();
    tied.router.linear.weight.value_mut().fill(0.0);
    tied.router.linear.bias.value_mut().fill(0.0);
    let det = prune_layer(2, moe, &[0, 1, 2, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_x(3, 5, 16, &mut rng);
    let g = Graph::inference();
    let mask = g.constant(Tensor::zeros([3, 1, 5]));
    let xv = g.constant(x);
    let a = tied.forward(&g, &xv, &mask).unwrap().hidden;
    let b = det.forward(&g, &xv, &mask).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn single_retention_equivalence_partitions_inputs() {
    let cfg = toy();
    let m = converted(cfg, 1);
    let Layer::Moe(moe) = &m.layers[2] else { panic!() };
    let mut moe = moe.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in moe.router.linear.weight.value_mut().data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let det = prune_layer(2, &moe, &[1]).unwrap();
    let g = Graph::inference();
    let (mut same, mut other) = (0, 0);
    for _ in 0..200 {
        let x = g.constant(random_x(1, 4, 16, &mut rng));
        let mask = g.constant(Tensor::zeros([1, 1, 4]));
        let routed = moe.forward(&g, &x, &mask).unwrap();
        let pruned = det.forward(&g, &x, &mask).unwrap();
        let equal = routed.hidden.value() == pruned.value();
        if routed.selections[0] == [1] {
            assert!(equal);
            same += 1;
        } else {
            assert!(!equal);
            other += 1;
        }
    }
    assert!(same > 0 && other > 0);
}

#[test]
fn symbolic_counts_match_enumeration() {
    let cfg = EncoderConfig {
        d: 24,
        h: 6,
        n_layers: 3,
        d_ff: 40,
        ..toy()
    };
    let m = converted(cfg.clone(), 2);
    let count = |l: &Layer<f64>| l.params().iter().map(|p| p.numel() as u64).sum::<u64>();
    assert_eq!(count(&m.layers[0]), standard_layer_params(&cfg));
    assert_eq!(count(&m.layers[1]), moe_layer_params(&cfg, 6));
    let r = report(1, &[(1, vec![1, 0, 0, 0, 0, 0]), (2, vec![0, 1, 0, 0, 0, 0])]);
    for keep in 1..=6 {
        let (p, _) = prune_model(&m, &r, keep).unwrap();
        assert_eq!(count(&p.layers[1]), deterministic_layer_params(&cfg, keep));
    }
    let (p, _) = prune_model(&m, &r, 1).unwrap();
    let rep = cost_report(&p, 16, CountOptions::default());
    let stack: u64 = rep.layers.iter().map(|l| l.params).sum();
    assert_eq!(rep.params_excluding_embeddings, stack + rep.head_params);
    assert!(rep.params_total > rep.params_excluding_embeddings);
    let embed = (30 + 8) * 24 + 2 * 24;
    assert_eq!(rep.params_total - rep.params_excluding_embeddings, embed);
}

#[test]
fn pruned_count_strictly_decreases_with_fewer_experts() {
    let cfg = EncoderConfig::bert_base();
    let counts: Vec<u64> = (1..=12).map(|m| deterministic_layer_params(&cfg, m)).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn reductions_and_remaining() {
    assert_eq!(param_reduction(100, 100), 0.0);
    assert_eq!(flops_remaining(100, 100), 100.0);
    let m = Encoder::<f64>::new(toy()).unwrap();
    let opts = CountOptions::default();
    let n = param_count(&m, opts);
    assert_eq!(param_reduction(n, n), 0.0);
    let with = param_count(&m, CountOptions { exclude_embeddings: false, ..opts });
    assert!(with > n);
}

fn pruned_specs(n_layers: usize, z: usize) -> Vec<LayerSpec> {
    (0..n_layers)
        .map(|i| {
            if i >= n_layers - z {
                LayerSpec::Deterministic { retained: vec![0] }
            } else {
                LayerSpec::Standard
            }
        })
        .collect()
}

#[test]
fn flop_model_properties() {
    let cfg = EncoderConfig::bert_base();
    let opts = CountOptions::default();
    let base = |l| flops_for(&cfg, &pruned_specs(12, 0), l, opts);
    assert!(base(256) > 2 * base(128));
    let std1 = flops_for(&cfg, &[LayerSpec::Standard], 128, CountOptions { include_pooler: false, ..opts });
    let det1 = flops_for(&cfg, &[LayerSpec::Deterministic { retained: vec![0] }], 128, CountOptions { include_pooler: false, ..opts });
    let head = 2 * 768 * 2 + 2;
    let ratio = (det1 - head) as f64 / (std1 - head) as f64;
    assert!((0.029..=0.035).contains(&ratio), "{ratio}");
    // Each converted layer removes the same amount.
    let red = |z| param_reduction_for(&cfg, z);
    assert!((red(4) - 2.0 * red(2)).abs() < 0.01);
    assert!((red(10) - 2.0 * red(5)).abs() < 0.01);
}

fn param_reduction_for(cfg: &EncoderConfig, z: u64) -> f64 {
    let head = 768 * 2 + 2 + 768 * 768 + 768;
    let base = 12 * standard_layer_params(cfg) + head;
    let pruned = (12 - z) * standard_layer_params(cfg) + z * deterministic_layer_params(cfg, 1) + head;
    param_reduction(base, pruned)
}

#[test]
fn flops_follow_structure_not_batch() {
    let m = converted(toy(), 1);
    let r = report(1, &[(2, vec![0, 5, 0, 0])]);
    let (p, _) = prune_model(&m, &r, 1).unwrap();
    let opts = CountOptions::default();
    assert!(flops_per_example(&p, 8, opts) < flops_per_example(&Encoder::<f64>::new(toy()).unwrap(), 8, opts));
}

#[test]
fn bench_contract() {
    let m = Encoder::<f32>::new(toy()).unwrap();
    let small = BenchConfig {
        batch: 4,
        seq_len: 8,
        warmup_iters: 1,
        timed_iters: 5,
        ..BenchConfig::default()
    };
    let r = bench(&m, &small).unwrap();
    assert_eq!(r.iteration_seconds.len(), 5);
    assert!(r.throughput > 0.0 && r.latency_ms > 0.0);
    let too_few = BenchConfig { timed_iters: 4, ..small.clone() };
    assert!(matches!(bench(&m, &too_few), Err(Error::Statistics(_))));
    let routed = converted(toy(), 1).cast::<f32>();
    assert!(matches!(bench(&routed, &small), Err(Error::Usage(_))));
    assert!(bench(&routed, &BenchConfig { routed: true, ..small }).is_ok());
    // The bench input is well-formed for the model.
    let ids = vec![1, 3, 4, 5];
    assert!(m.predict(&TokenBatch::unmasked(1, 4, ids).unwrap()).is_ok());
}
