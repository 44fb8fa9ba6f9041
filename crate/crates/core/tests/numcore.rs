mod common;

use common::prims;
use lim::numcore::{logsumexp, BatchNormState, Tape, Tensor};
use lim::Error;
use proptest::prelude::*;

#[test]
fn primitive_gradients_f32() {
    let f = prims::failures::<f32>();
    assert!(f.is_empty(), "{f:?}");
}

#[test]
fn primitive_gradients_f64() {
    let f = prims::failures::<f64>();
    assert!(f.is_empty(), "{f:?}");
}

#[test]
fn gradients_accumulate_through_reuse() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    let s = t.sum(z);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[4.0, -3.0]);
}

#[test]
fn constants_have_no_gradient() {
    let mut t = Tape::<f32>::new();
    let c = t.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let p = t.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let m = t.mul(c, p).unwrap();
    let s = t.sum(m);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut t = Tape::<f32>::new();
    let p = t.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let e = t.exp(p);
    assert!(matches!(t.backward(e), Err(Error::Rank { .. })));
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut t = Tape::<f32>::new();
    let a = t.param(Tensor::zeros(&[2, 3]));
    let b = t.param(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
    let w = t.param(Tensor::zeros(&[4, 5]));
    let bias = t.param(Tensor::zeros(&[4]));
    assert!(matches!(t.linear(a, w, bias), Err(Error::Dimension { .. })));
}

#[test]
fn degenerate_inputs_are_rejected() {
    let mut t = Tape::<f64>::new();
    let z = t.param(Tensor::from_f64(&[1, 3], &[0.0, 0.0, 0.0]).unwrap());
    assert!(matches!(t.l2_normalize_rows(z), Err(Error::DegenerateEmbedding(_))));
    let one = t.param(Tensor::zeros(&[1, 3]));
    let g = t.param(Tensor::filled(&[3], 1.0));
    let o = t.param(Tensor::zeros(&[3]));
    let mut st = BatchNormState::new(3);
    assert!(matches!(
        t.batch_norm_train(one, g, o, &mut st, 0.1, 1e-5),
        Err(Error::DegenerateBatch(1))
    ));
    let neg = t.param(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    assert!(matches!(t.log(neg), Err(Error::Domain { .. })));
    let empty = t.param(Tensor::zeros(&[0]));
    assert!(matches!(t.mean(empty), Err(Error::EmptyReduction { .. })));
}

#[test]
fn known_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let w = t.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap());
    let c = t.conv1d(x, w, 1).unwrap();
    assert_eq!(t.value(c).data(), &[-1.0, -1.0, -1.0, -1.0]);
    let p = t.constant(Tensor::from_f64(&[1, 1, 6], &[3.0, 1.0, 2.0, 0.0, 5.0, 4.0]).unwrap());
    let m = t.max_pool1d(p, 2).unwrap();
    assert_eq!(t.value(m).data(), &[3.0, 2.0, 5.0]);
    let s = t.constant(Tensor::from_f64(&[3], &[-800.0, 0.0, 800.0]).unwrap());
    let sp = t.softplus(s);
    assert_eq!(t.value(sp).data(), &[0.0, 2f64.ln(), 800.0]);
    assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn layer_norm_output_is_standardized() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 10.0]).unwrap());
    let g = t.constant(Tensor::filled(&[4], 1.0));
    let o = t.constant(Tensor::zeros(&[4]));
    let y = t.layer_norm(x, g, o, 0.0).unwrap();
    let v = t.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
}

#[test]
fn inference_tape_matches_training_values() {
    let run = |t: &mut Tape<f32>| {
        let x = t.param(Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap());
        let w = t.param(Tensor::from_f64(&[2, 3], &[0.3, 0.2, -0.1, 0.5, -0.5, 0.25]).unwrap());
        let b = t.param(Tensor::from_f64(&[2], &[0.01, -0.02]).unwrap());
        let l = t.linear(x, w, b).unwrap();
        let s = t.sigmoid(l);
        t.value(s).clone()
    };
    assert_eq!(run(&mut Tape::new()), run(&mut Tape::inference()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_softmax_rows_normalize(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[3, 4], &data).unwrap());
        let y = t.log_softmax(x).unwrap();
        for row in t.value(y).data().chunks(4) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_bounded(data in prop::collection::vec(-1e3f64..1e3, 8)) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_f64(&[8], &data).unwrap());
        let y = t.sigmoid(x);
        prop_assert!(t.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn logsumexp_bounds(data in prop::collection::vec(-50.0f64..50.0, 1..16)) {
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = logsumexp(&data);
        prop_assert!(l >= max - 1e-12);
        prop_assert!(l <= max + (data.len() as f64).ln() + 1e-12);
    }
}
