use std::collections::BTreeMap;

use cocktail_tensor::gradcheck::{finite_diff_check, GradCheckOptions, Objective, Oracle, Probes};
use cocktail_tensor::suite::{primitive_cases, primitive_options, Primitive};
use cocktail_tensor::{
    fault, Conv2dSpec, Element, OpKind, ParamStore, Pool2dSpec, PoolMode, ReduceMode, Result, Tape, Tensor,
    TensorError, Unary, Var,
};
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn family(p: &Primitive) -> String {
    let name = p.name();
    match name.split_once('/') {
        Some((head, tail)) if head == "pointwise" => format!("{head}/{tail}"),
        Some((head, _)) => head.to_string(),
        None => name,
    }
}

#[test]
fn every_primitive_passes_gradient_check_on_random_shapes() {
    let cases = primitive_cases(2024, 20);
    let opts = primitive_options();
    let mut counts = BTreeMap::<String, usize>::new();
    for case in &cases {
        let report = case.check::<f64>(&opts).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "{:?} on {:?}: {:?}",
            case.primitive,
            case.inputs,
            report.worst()
        );
        *counts.entry(family(&case.primitive)).or_default() += 1;
    }
    assert!(counts.values().all(|&n| n >= 20), "{counts:?}");
}

#[test]
fn sign_flipped_rule_is_detected() {
    let case = primitive_cases(7, 1)
        .into_iter()
        .find(|c| c.primitive == Primitive::Pointwise(Unary::Sigmoid))
        .unwrap();
    let opts = primitive_options();
    assert!(case.check::<f64>(&opts).unwrap().max_rel_err < 1e-6);
    let _guard = fault::flip_backward_sign(OpKind::Unary(Unary::Sigmoid));
    assert!(case.check::<f64>(&opts).unwrap().max_rel_err > 1.0);
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![1, 3, 4], |i| i as f64));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, k, None, Conv2dSpec::default()).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn all_ones_kernel_sums_constant_neighbourhood() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![1, 5, 5], 1.5));
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, None, Conv2dSpec::same((3, 3), (1, 1))).unwrap();
    assert_eq!(tape.value(y).data()[2 * 5 + 2], 13.5);
    // corner only sees 4 in-bounds taps
    assert_eq!(tape.value(y).data()[0], 6.0);
}

#[test]
fn dilated_kernel_extent() {
    // dilation 2 on a 3x3 kernel spans 5 pixels: a valid conv on 5x5 yields 1x1
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![1, 5, 5], |i| i as f64));
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let spec = Conv2dSpec {
        dilation: (2, 2),
        ..Default::default()
    };
    let y = tape.conv2d(x, k, None, spec).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1]);
    let taps: f64 = [0, 2, 4, 10, 12, 14, 20, 22, 24].iter().map(|&i| i as f64).sum();
    assert_eq!(tape.value(y).data()[0], taps);
    let x4 = tape.constant(Tensor::zeros(vec![1, 4, 4]));
    assert!(tape.conv2d(x4, k, None, spec).is_err());
}

#[test]
fn same_conv_with_dilation_wider_than_input_sees_only_center() {
    // every off-center tap falls outside a 3x5 plane at dilation 8
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::from_fn(vec![1, 3, 5], |i| i as f64 + 1.0));
    let k = tape.variable(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 + 1.0));
    let y = tape.conv2d(x, k, None, Conv2dSpec::same((3, 3), (8, 8))).unwrap();
    let expected: Vec<f64> = tape.value(x).data().iter().map(|v| 5.0 * v).collect();
    assert_eq!(tape.value(y).data(), &expected[..]);
    let loss = tape.sum_all(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 5.0));
    let gk = g.get(k).unwrap().data().to_vec();
    assert_eq!(gk[4], 120.0);
    assert!(gk.iter().enumerate().all(|(i, &v)| i == 4 || v == 0.0));
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 4, 4]));
    let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, k, None, Conv2dSpec::default()),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mx = tape.pool2d(x, Pool2dSpec::max(2)).unwrap();
    let av = tape.pool2d(x, Pool2dSpec::avg(2)).unwrap();
    assert_eq!(tape.value(mx).data(), &[4.0]);
    assert_eq!(tape.value(av).data(), &[2.5]);
    let c = tape.constant(Tensor::full(vec![2, 3, 5], 0.7));
    let global = Pool2dSpec {
        mode: PoolMode::Avg,
        window: (3, 5),
        stride: (3, 5),
    };
    let g = tape.pool2d(c, global).unwrap();
    assert_eq!(tape.shape(g), &[2, 1, 1]);
    assert!(tape.value(g).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let small = tape.constant(Tensor::zeros(vec![1, 1, 3]));
    assert!(tape.pool2d(small, Pool2dSpec::max(2)).is_err());
}

#[test]
fn max_pool_ties_route_to_first_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[1, 2, 2], &[3.0, 3.0, 3.0, 3.0]));
    let y = tape.pool2d(x, Pool2dSpec::max(2)).unwrap();
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[1, 1, 2], &[1.0, 2.0]));
    let y = tape.upsample2x(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4]);
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);

    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::from_fn(vec![2, 4, 6], |i| (i as f64).sin()));
    let up = tape.upsample2x(c).unwrap();
    let down = tape.pool2d(up, Pool2dSpec::avg(2)).unwrap();
    assert_eq!(tape.value(down), tape.value(c));
}

#[test]
fn affine_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.variable(t(&[2, 1], &[1.0, 1.0]));
    let b = tape.variable(t(&[1], &[0.5]));
    let y = tape.affine(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.5]);

    let mut tape = Tape::<f64>::new();
    let xv = t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.0]);
    let x = tape.constant(xv.clone());
    let eye = tape.variable(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.affine(x, eye, None).unwrap();
    assert_eq!(tape.value(y), &xv);
    let l = tape.sum_all(y).unwrap();
    let g = tape.backward(l).unwrap();
    // d sum(xW)/dW[i,j] = sum_n x[n,i]
    assert_eq!(g.get(eye).unwrap().data(), &[4.5, 4.5, 3.0, 3.0]);

    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let bad = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(tape.affine(a, bad, None).is_err());
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(vec![1]));
    let s = tape.sigmoid(z).unwrap();
    let l = tape.unary(Unary::Log1p, z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    assert_eq!(tape.value(l).data(), &[0.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let base = [0.3, -1.2, 2.0, 0.0];
    let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
    let a = tape.constant(t(&[4], &base));
    let b = tape.constant(t(&[4], &shifted));
    let (sa, sb) = (tape.softmax(a, 0).unwrap(), tape.softmax(b, 0).unwrap());
    for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert!((p - q).abs() < 1e-15);
    }
}

#[test]
fn softmax_cross_entropy_gradient_is_prediction_minus_target() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.variable(t(&[4], &[0.1, 1.5, -0.3, 0.8]));
    let p = tape.softmax(logits, 0).unwrap();
    let lp = tape.log_clamped(p, 1e-300).unwrap();
    let y = tape.constant(t(&[4], &[0.0, 0.0, -1.0, 0.0]));
    let prod = tape.mul(lp, y).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let probs = tape.value(p).data().to_vec();
    let g = tape.backward(loss).unwrap();
    for (k, (&gk, &pk)) in g.get(logits).unwrap().data().iter().zip(&probs).enumerate() {
        let target = if k == 2 { 1.0 } else { 0.0 };
        assert!((gk - (pk - target)).abs() < 1e-12);
    }
}

#[test]
fn channel_max_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]));
    let y = tape.channel_max(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.9, 0.8]);
    let row = tape.constant(t(&[1, 3], &[0.2, 0.5, 0.3]));
    let single = tape.channel_max(row).unwrap();
    assert_eq!(tape.value(single).data(), &[0.2, 0.5, 0.3]);
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum_all(x).unwrap();
    assert_eq!(tape.value(s).data(), &[6.0]);
    let c = tape.variable(Tensor::full(vec![2, 5], 4.0));
    let m = tape.mean_all(c).unwrap();
    assert_eq!(tape.value(m).data(), &[4.0]);
    let g = tape.backward(m).unwrap();
    assert!(g.get(c).unwrap().data().iter().all(|&v| v == 0.1));

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(
        tape.reduce(x, ReduceMode::Sum, &[1]),
        Err(TensorError::InvalidAxis { .. })
    ));
}

#[test]
fn backward_of_sum_of_squares_is_twice_input() {
    let mut tape = Tape::<f64>::new();
    let xv = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -0.25]);
    let x = tape.variable(xv.clone());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum_all(sq).unwrap();
    let g = tape.backward(l).unwrap();
    let expected: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
}

#[test]
fn diamond_graph_sums_gradients_over_paths() {
    // f = sum(sigmoid(x) * tanh(x) + 3x)
    let xv = [0.3, -0.7, 1.1];
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[3], &xv));
    let a = tape.sigmoid(x).unwrap();
    let b = tape.tanh(x).unwrap();
    let ab = tape.mul(a, b).unwrap();
    let c = tape.scale(x, 3.0).unwrap();
    let s = tape.add(ab, c).unwrap();
    let l = tape.sum_all(s).unwrap();
    let g = tape.backward(l).unwrap();
    for (&x, &gx) in xv.iter().zip(g.get(x).unwrap().data()) {
        let sg = 1.0 / (1.0 + (-x).exp());
        let expected = sg * (1.0 - sg) * x.tanh() + sg * (1.0 - x.tanh().powi(2)) + 3.0;
        assert!((gx - expected).abs() < 1e-14);
    }
}

#[test]
fn reused_variable_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let a = tape.scale(x, 2.0).unwrap();
    let b = tape.scale(x, 5.0).unwrap();
    let s = tape.add(a, b).unwrap();
    let l = tape.sum_all(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0, 7.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    let l = tape.sum_all(x).unwrap();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(TensorError::TapeConsumed)));

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let l = tape.sum_all(x).unwrap();
    tape.backward_retained(l).unwrap();
    assert!(tape.backward_retained(l).is_ok());
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[1000.0]));
    assert!(matches!(tape.unary(Unary::Exp, x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn channel_max_routes_all_mass_to_argmax_rows() {
    let mut tape = Tape::<f64>::new();
    let xv = t(&[3, 4], &[0.1, 0.9, 0.3, 0.3, 0.5, 0.2, 0.3, 0.1, 0.4, 0.4, 0.2, 0.6]);
    let x = tape.variable(xv);
    let y = tape.channel_max(x).unwrap();
    let w = tape.constant(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
    let p = tape.mul(y, w).unwrap();
    let l = tape.sum_all(p).unwrap();
    let g = tape.backward(l).unwrap();
    let gx = g.get(x).unwrap().data();
    // argmax rows per column: 1, 0, 0 (tie goes to the first), 2
    let expected = [0.0, -2.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0];
    assert_eq!(gx, &expected);
    let delivered: f64 = gx.iter().sum();
    assert_eq!(delivered, 1.0 - 2.0 + 0.5 + 3.0);
}

struct Chain;

impl Objective for Chain {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var> {
        let mut h = tape.param(params, params.find("x").unwrap());
        for _ in 0..5 {
            h = tape.sigmoid(h)?;
            h = tape.scale(h, 3.0)?;
        }
        tape.sum_all(h)
    }
}

#[test]
fn sigmoid_chain_depth_five() {
    let mut store = ParamStore::<f64>::new();
    store.add("x", t(&[4], &[-1.0, 0.2, 0.7, 2.0]));
    let r = finite_diff_check(&Chain, &store, &primitive_options()).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn single_precision_gradient_against_f64_oracle() {
    let mut store = ParamStore::<f32>::new();
    store.add("x", Tensor::from_f64(vec![4], &[-1.0, 0.2, 0.7, 2.0]).unwrap());
    let opts = GradCheckOptions {
        eps: 1e-6,
        probes: Probes::Random { count: 4, seed: 3 },
        oracle: Oracle::F64,
        floor: 1e-6,
    };
    let r = finite_diff_check(&Chain, &store, &opts).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let case = primitive_cases(99, 1)
            .into_iter()
            .find(|c| matches!(c.primitive, Primitive::Conv2d { .. }))
            .unwrap();
        let store = case.params::<f32>();
        let mut tape = Tape::new();
        let l = case.eval(&mut tape, &store).unwrap();
        let v = tape.value(l).clone();
        let g = tape.backward(l).unwrap();
        let mut s = store.clone();
        s.accumulate(&g);
        (v, s.iter().map(|p| p.grad.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_for_large_inputs(v in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![v.len()], v.clone()).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn channel_max_is_row_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..5),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let flat = |r: &Vec<Vec<f64>>| Tensor::new(vec![r.len(), 6], r.concat()).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(flat(&rows));
        let b = tape.constant(flat(&shuffled));
        let (ma, mb) = (tape.channel_max(a).unwrap(), tape.channel_max(b).unwrap());
        prop_assert_eq!(tape.value(ma), tape.value(mb));
    }
}
