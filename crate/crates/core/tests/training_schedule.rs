use headroute::data::{gen_cluster_task, SyntheticTaskSpec};
use headroute::encoder::{Encoder, EncoderConfig, Layer};
use headroute::numkit::{Graph, ParamSet, Parameter, Parameterized, Tensor};
use headroute::training::{
    balance_loss, balance_loss_value, clip_gradients, convert_next_layer, lr_at, router_probs, total_loss, train,
    AdamW, ScheduleState, TrainConfig,
};
use headroute::Error;
use proptest::prelude::*;

const EPS: f64 = 1e-7;

#[test]
fn balance_loss_examples() {
    for n in [2, 3, 4, 12] {
        assert!(balance_loss_value(&vec![1.0 / n as f64; n], EPS).unwrap().abs() < 1e-9);
    }
    // Independent float64 evaluation of the formula.
    let v = balance_loss_value(&[1.0, 0.0], EPS).unwrap();
    assert!((v - 4.029523937739579).abs() < 1e-9, "{v}");
    let v = balance_loss_value(&[0.7, 0.2, 0.1], EPS).unwrap();
    assert!((v - 0.3105402581466853).abs() < 1e-12);
    assert!(matches!(balance_loss_value(&[1.5, -0.5], EPS), Err(Error::Domain(_))));
}

#[test]
fn balance_loss_averages_layers() {
    let g = Graph::<f64>::inference();
    let a = g.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::from_f64([2], &[0.5, 0.5]).unwrap());
    let v = balance_loss(&g, &[a, b], EPS).unwrap().value().item().unwrap();
    assert!((v - 4.029523937739579 / 2.0).abs() < 1e-9);
}

#[test]
fn balance_gradient_reaches_router_logits() {
    let g = Graph::<f64>::new();
    let logits = g.input(Tensor::from_f64([2, 3], &[2.0, 0.0, -1.0, 1.0, 0.5, 0.0]).unwrap());
    let p = router_probs(&g, &logits).unwrap();
    let loss = balance_loss(&g, &[p], EPS).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert!(grads.wrt(&logits).unwrap().data().iter().any(|&v| v.abs() > 1e-3));
}

proptest! {
    #[test]
    fn balance_loss_nonnegative_and_symmetric(raw in prop::collection::vec(0.0f64..1.0, 2..8), rot in 0usize..8) {
        let s: f64 = raw.iter().sum::<f64>() + 1e-3;
        let p: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / s).collect();
        let a = balance_loss_value(&p, EPS).unwrap();
        prop_assert!(a >= -1e-12);
        let mut q = p.clone();
        q.rotate_left(rot % p.len());
        prop_assert!((a - balance_loss_value(&q, EPS).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn total_loss_examples() {
    let g = Graph::<f64>::inference();
    let task = g.constant(Tensor::scalar(1.0));
    let bal = g.constant(Tensor::scalar(0.5));
    let item = |v: headroute::numkit::Var<f64>| v.value().item().unwrap();
    assert_eq!(item(total_loss(&g, &task, Some(&bal), true, 0.1).unwrap()), 1.05);
    assert_eq!(item(total_loss(&g, &task, Some(&bal), false, 0.1).unwrap()), 1.0);
    assert_eq!(item(total_loss(&g, &task, Some(&bal), true, 0.0).unwrap()), 1.0);
}

#[test]
fn lr_schedule_examples() {
    let (peak, total) = (2e-5, 100);
    assert_eq!(lr_at(0, total, peak, 0.1), 0.0);
    assert_eq!(lr_at(10, total, peak, 0.1), peak);
    assert!((lr_at(5, total, peak, 0.1) - peak / 2.0).abs() < 1e-18);
    assert!(lr_at(total, total, peak, 0.1).abs() < 1e-20);
    assert!((lr_at(55, total, peak, 0.1) - peak / 2.0).abs() < 1e-18);
    // Warmup length is ceil(0.1·95) = 10.
    assert_eq!(lr_at(10, 95, peak, 0.1), peak);
    assert!(lr_at(9, 95, peak, 0.1) < peak);
}

fn scalar_param(v: f64) -> ParamSet<f64> {
    ParamSet(vec![Parameter::new("w", Tensor::from_f64([1], &[v]).unwrap())])
}

fn grads_of(set: &ParamSet<f64>, slope: f64) -> headroute::numkit::Gradients<f64> {
    let g = Graph::new();
    let w = g.param(&set[0]);
    let loss = g.sum(&g.scale(&w, slope));
    g.backward(&loss).unwrap()
}

#[test]
fn adamw_examples() {
    let mut set = scalar_param(1.0);
    let mut opt = AdamW::new(0.0);
    let grads = grads_of(&set, 0.0);
    opt.step(set.parameters_mut(), &grads, 0.1).unwrap();
    assert_eq!(set[0].value().data()[0], 1.0);

    let mut opt = AdamW::new(0.01);
    for i in 1..=3 {
        let grads = grads_of(&set, 0.0);
        opt.step(set.parameters_mut(), &grads, 0.1).unwrap();
        assert!((set[0].value().data()[0] - 0.999f64.powi(i)).abs() < 1e-15);
    }

    // Hand-computed recurrence: θ₀ = 1, g = 1, lr = 0.1, decay 0.01.
    let mut set = scalar_param(1.0);
    let mut opt = AdamW::new(0.01);
    let want = [0.8990000009999999, 0.7981010019990006];
    for w in want {
        let grads = grads_of(&set, 1.0);
        opt.step(set.parameters_mut(), &grads, 0.1).unwrap();
        assert!((set[0].value().data()[0] - w).abs() < 1e-15);
    }
}

#[test]
fn clipping_examples() {
    let set = ParamSet(vec![Parameter::new("g", Tensor::from_f64([2], &[0.0, 0.0]).unwrap())]);
    let run = |coef: [f64; 2]| {
        let g = Graph::new();
        let w = g.param(&set[0]);
        let c = g.constant(Tensor::from_f64([2], &coef).unwrap());
        let mut grads = g.backward(&g.sum(&g.mul(&w, &c).unwrap())).unwrap();
        let scale = clip_gradients(&set.parameters(), &mut grads, 1.0).unwrap();
        (scale, grads.param("g").unwrap().data().to_vec()) as (f64, Vec<f64>)
    };
    assert_eq!(run([0.3, 0.4]).0, 1.0);
    let (s, v) = run([3.0, 4.0]);
    assert!((s - 0.2).abs() < 1e-15);
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    let (s, v) = run([2.0, 0.0]);
    assert_eq!(s, 0.5);
    assert!((v[0] - 1.0).abs() < 1e-6);
}

fn toy(n_layers: usize) -> EncoderConfig {
    EncoderConfig {
        d: 16,
        h: 4,
        n_layers,
        d_ff: 32,
        vocab_size: 40,
        max_len: 10,
        n_classes: 2,
        seed: 1,
    }
}

#[test]
fn conversion_goes_deepest_first() {
    let mut m = Encoder::<f64>::new(toy(4)).unwrap();
    let mut s = ScheduleState::new(2);
    assert!(s.balance_active);
    assert_eq!(convert_next_layer(&mut m, &mut s, 1, 0).unwrap(), Some(3));
    assert!(s.balance_active);
    assert_eq!(convert_next_layer(&mut m, &mut s, 1, 0).unwrap(), Some(2));
    assert!(!s.balance_active);
    assert_eq!(s.current_modified_layers, 2);
    assert_eq!(convert_next_layer(&mut m, &mut s, 1, 0).unwrap(), None);
    assert_eq!(m.layers.len(), 4);
    assert_eq!(m.count_moe_layers(), 2);
    assert!(matches!(m.layers[1], Layer::Standard(_)));
}

fn task() -> (headroute::data::Dataset, headroute::data::Dataset) {
    gen_cluster_task(&SyntheticTaskSpec {
        n_clusters: 4,
        n_classes: 2,
        vocab_size: 40,
        seq_len: 10,
        train_examples: 96,
        valid_examples: 32,
        seed: 5,
    })
    .unwrap()
}

fn quick_cfg(z: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: z + 2,
        target_modified_layers: z,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_follows_schedule() {
    let (tr, va) = task();
    let run = || {
        let mut m = Encoder::<f32>::new(toy(2)).unwrap();
        let mut steps = Vec::new();
        let report = train(&mut m, &tr, Some(&va), &quick_cfg(2), |r| {
            steps.push(r.clone());
            Ok(())
        })
        .unwrap();
        (m, report, steps)
    };
    let (m1, r1, s1) = run();
    let (m2, r2, _) = run();
    assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
    for (a, b) in m1.parameters().iter().zip(m2.parameters()) {
        assert_eq!(a.value(), b.value());
    }
    assert_eq!(s1.len(), 4 * 6);
    let stages: Vec<u8> = r1.epochs.iter().map(|e| e.stage).collect();
    assert_eq!(stages, vec![1, 1, 2, 2]);
    let converted: Vec<Option<usize>> = r1.epochs.iter().map(|e| e.converted_layer).collect();
    assert_eq!(converted, vec![Some(1), Some(0), None, None]);
    assert!(s1.iter().filter(|r| r.epoch <= 2).all(|r| r.balance_loss.is_some()));
    assert!(s1.iter().filter(|r| r.epoch > 2).all(|r| r.balance_loss.is_none() && r.total_loss == r.task_loss));
    assert!(!r1.schedule.balance_active);
    assert_eq!(r1.schedule.current_modified_layers, 2);
}

#[test]
fn zero_target_is_plain_fine_tuning() {
    let (tr, _) = task();
    let mut m = Encoder::<f32>::new(toy(2)).unwrap();
    let report = train(&mut m, &tr, None, &quick_cfg(0), |_| Ok(())).unwrap();
    assert_eq!(m.count_moe_layers(), 0);
    assert!(report.epochs.iter().all(|e| e.stage == 2 && e.usage.is_empty()));
}

#[test]
fn zero_lambda_ignores_balance_term() {
    let (tr, _) = task();
    let mut cfg = quick_cfg(1);
    cfg.lambda = 0.0;
    let mut m = Encoder::<f32>::new(toy(2)).unwrap();
    let mut records = Vec::new();
    train(&mut m, &tr, None, &cfg, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert!(records.iter().all(|r| r.balance_loss.is_none() && r.total_loss == r.task_loss));
}

#[test]
fn invalid_configs_are_rejected() {
    let (tr, _) = task();
    let mut m = Encoder::<f32>::new(toy(2)).unwrap();
    for cfg in [
        TrainConfig { target_modified_layers: 3, epochs: 5, ..quick_cfg(1) },
        TrainConfig { warmup_ratio: 0.0, ..quick_cfg(1) },
        TrainConfig { k: 5, ..quick_cfg(1) },
        TrainConfig { epsilon: 0.0, ..quick_cfg(1) },
    ] {
        assert!(matches!(train(&mut m, &tr, None, &cfg, |_| Ok(())), Err(Error::Config(_))));
    }
}

#[test]
fn non_finite_loss_names_the_step() {
    let (tr, _) = task();
    let mut m = Encoder::<f32>::new(toy(2)).unwrap();
    m.classifier.bias.value_mut().data_mut()[0] = f32::NAN;
    let err = train(&mut m, &tr, None, &quick_cfg(1), |_| Ok(())).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(msg) if msg.contains("step 1")), "{err}");
}
