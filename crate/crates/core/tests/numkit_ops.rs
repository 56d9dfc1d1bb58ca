use headroute::numkit::{grad_check, Graph, ParamSet, Parameter, Tensor};
use headroute::selfcheck::{model_check, op_checks};
use headroute::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "got {got:?}, want {want:?}");
    }
}

#[test]
fn matmul_identity_and_hand_example() {
    let g = Graph::<f64>::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = g.constant(random(&[3, 3], &mut rng));
    let eye = g.constant(Tensor::eye(3));
    let out = g.matmul(&eye, &m).unwrap();
    assert_eq!(out.value(), m.value());

    let a = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t64(&[2, 1], &[1., 1.]));
    assert_eq!(g.matmul(&a, &b).unwrap().value().data(), &[3., 7.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let g = Graph::<f64>::inference();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 5]));
    let err = g.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    // Oracle: central differences, h = 1e-5.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 6], &mut rng);
    let mut params = ParamSet(vec![Parameter::new("a", a.clone())]);
    let bc = b.clone();
    let report = grad_check(&mut params, 1e-5, |p, g| {
        let out = g.matmul(&g.param(&p[0]), &g.constant(bc.clone()))?;
        Ok(g.sum(&out))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");

    let g = Graph::new();
    let av = g.input(a);
    let out = g.matmul(&av, &g.constant(b.clone())).unwrap();
    let loss = g.sum(&out);
    let grads = g.backward(&loss).unwrap();
    let da = grads.wrt(&av).unwrap();
    for r in 0..4 {
        for c in 0..5 {
            let row_sum: f64 = (0..6).map(|j| b.data()[c * 6 + j]).sum();
            assert!((da.data()[r * 5 + c] - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::inference();
    let s = |v: &[f64]| {
        g.softmax_lastdim(&g.constant(t64(&[v.len()], v)))
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    assert_eq!(s(&[0., 0.]), vec![0.5, 0.5]);
    assert_close(&s(&[1000., 0.]), &[1., 0.], 1e-9);
    assert_close(&s(&[1., 2., 3.]), &[0.09003, 0.24473, 0.66524], 1e-5);
}

#[test]
fn gelu_examples() {
    let g = Graph::<f64>::inference();
    let v = g.gelu(&g.constant(t64(&[3], &[0.0, 1.0, 12.0])));
    let d = v.value().data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 0.841_344_746_068_543).abs() < 1e-7);
    assert!(((d[2] - 12.0) / 12.0).abs() < 1e-6);
}

#[test]
fn layer_norm_examples() {
    let g = Graph::<f64>::inference();
    let ones = g.constant(Tensor::ones([3]));
    let zeros = g.constant(Tensor::zeros([3]));
    let c = g
        .layer_norm(&g.constant(t64(&[1, 3], &[5., 5., 5.])), &ones, &zeros, 1e-5)
        .unwrap();
    assert_eq!(c.value().data(), &[0., 0., 0.]);
    let r = g
        .layer_norm(&g.constant(t64(&[1, 3], &[1., 2., 3.])), &ones, &zeros, 0.0)
        .unwrap();
    assert_close(r.value().data(), &[-1.22474, 0., 1.22474], 1e-5);
}

#[test]
fn cross_entropy_examples() {
    let g = Graph::<f64>::inference();
    let ce = |v: &[f64], label: usize| {
        g.cross_entropy(&g.constant(t64(&[1, v.len()], v)), &[label])
            .unwrap()
            .value()
            .item()
            .unwrap()
    };
    assert!((ce(&[0., 0.], 0) - std::f64::consts::LN_2).abs() < 1e-6);
    assert!(ce(&[100., 0.], 0) < 1e-12);
    assert!((ce(&[1., 2., 3.], 2) - 0.40761).abs() < 1e-5);
    let err = g
        .cross_entropy(&g.constant(t64(&[1, 2], &[0., 0.])), &[2])
        .unwrap_err();
    assert!(matches!(err, Error::Index { .. }));
}

#[test]
fn backward_requires_recording() {
    let g = Graph::<f64>::inference();
    let x = g.input(Tensor::ones([2]));
    let loss = g.sum(&x);
    assert!(matches!(g.backward(&loss), Err(Error::Usage(_))));

    let g = Graph::<f64>::new();
    let c = g.constant(Tensor::ones([2]));
    let loss = g.sum(&c);
    assert!(matches!(g.backward(&loss), Err(Error::Usage(_))));
}

#[test]
fn backward_visits_in_reverse_order_and_skips_unreachable() {
    let g = Graph::<f64>::new();
    let a = Parameter::new("a", t64(&[2], &[1., 2.]));
    let unused = Parameter::new("unused", t64(&[2], &[1., 2.]));
    let av = g.param(&a);
    let _uv = g.param(&unused);
    let sq = g.mul(&av, &av).unwrap();
    let loss = g.sum(&sq);
    let grads = g.backward(&loss).unwrap();
    let order = grads.visit_order();
    assert!(order.windows(2).all(|w| w[0] > w[1]), "{order:?}");
    assert_eq!(grads.param("a").unwrap().data(), &[2., 4.]);
    assert!(grads.param("unused").is_none());
}

#[test]
fn grad_check_trivial_cases() {
    let mut p = ParamSet(vec![Parameter::new("theta", t64(&[3], &[1., 2., 3.]))]);
    let report = grad_check(&mut p, 1e-5, |p, g| {
        let v = g.param(&p[0]);
        Ok(g.sum(&g.mul(&v, &v)?))
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");

    let report = grad_check(&mut p, 1e-5, |_, g| Ok(g.constant(Tensor::scalar(3.0)))).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn every_op_passes_gradient_check() {
    for seed in [11, 12] {
        let checks = op_checks(seed).unwrap();
        assert!(checks.len() >= 17);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }
}

#[test]
fn routed_model_loss_passes_gradient_check() {
    let c = model_check(0).unwrap();
    assert!(c.passed() && c.elements > 3000, "{c:?}");
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 1..12)) {
        let g = Graph::<f64>::inference();
        let n = values.len();
        let y = g.softmax_lastdim(&g.constant(Tensor::new([n], values).unwrap())).unwrap();
        let total: f64 = y.value().data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(y.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(values in prop::collection::vec(-100f64..100.0, 8)) {
        let g = Graph::<f64>::inference();
        let y = g.layer_norm(
            &g.constant(Tensor::new([2, 4], values).unwrap()),
            &g.constant(Tensor::ones([4])),
            &g.constant(Tensor::zeros([4])),
            1e-5,
        ).unwrap();
        for row in y.value().data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            prop_assert!(mean.abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_with_identity_twice_is_exact(values in prop::collection::vec(-1e3f32..1e3, 12)) {
        let g = Graph::<f32>::inference();
        let a = g.constant(Tensor::new([3, 4], values).unwrap());
        let eye = g.constant(Tensor::eye(4));
        let once = g.matmul(&a, &eye).unwrap();
        let twice = g.matmul(&once, &eye).unwrap();
        prop_assert_eq!(twice.value(), a.value());
    }
}
