//! Worked examples and properties of the public op contract.

use dynprompt_autodiff::{finite_difference_check, Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_does_not_overflow() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6, "{v:?}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let data: Vec<f64> = (0..12).map(|i| ((i * 37) % 17) as f64 * 0.7 - 5.0).collect();
    let mut g = Graph::inference();
    let x = g.constant(t(&[3, 4], &data));
    let y = g.softmax(x, 1).unwrap();
    for row in g.value(y).data().chunks(4) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{row:?}");
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::zeros([3, 4]));
    assert!(matches!(g.softmax(x, 2), Err(Error::Contract { .. })));
}

#[test]
fn masked_softmax_zeroes_dropped_positions() {
    let mut g = Graph::inference();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 0.5]));
    let y = g.masked_softmax(x, &[true, false, true, false, false, false]).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-6);
    // An empty row falls back to the plain softmax.
    for &p in &v[3..] {
        assert!((p - 1.0 / 3.0).abs() < 1e-6);
    }
}

fn sample(feature: Tensor<f32>, points: &[f64]) -> Vec<f32> {
    let mut g = Graph::inference();
    let f = g.constant(feature);
    let p = g.constant(t(&[points.len() / 2, 2], points));
    let y = g.bilinear_sample(f, p).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn bilinear_on_grid_point_returns_cell() {
    let data: Vec<f64> = (0..4 * 5 * 2).map(|i| i as f64).collect();
    let f = t(&[4, 5, 2], &data);
    // Cell (row 2, col 3) has its centre at ((3 + 0.5) / 5, (2 + 0.5) / 4).
    let v = sample(f.clone(), &[3.5 / 5.0, 2.5 / 4.0]);
    assert_eq!(v, vec![f.at(&[2, 3, 0]), f.at(&[2, 3, 1])]);
}

#[test]
fn bilinear_of_constant_map_is_constant() {
    let f = Tensor::full([3, 3, 1], 0.75f32);
    for v in sample(f, &[0.0, 0.0, 0.41, 0.93, 1.0, 0.5, -3.0, 7.0]) {
        assert!((v - 0.75).abs() < 1e-6);
    }
}

#[test]
fn bilinear_midpoint_of_four_cells() {
    let f = t(&[2, 2, 1], &[0.0, 2.0, 4.0, 6.0]);
    let v = sample(f, &[0.5, 0.5]);
    // (0 + 2 + 4 + 6) / 4
    assert!((v[0] - 3.0).abs() < 1e-6);
}

#[test]
fn bilinear_clamps_outside_points_to_border() {
    let f = t(&[2, 2, 1], &[0.0, 2.0, 4.0, 6.0]);
    assert_eq!(sample(f.clone(), &[-1.0, -1.0]), vec![0.0]);
    assert_eq!(sample(f, &[2.0, 2.0]), vec![6.0]);
}

#[test]
fn gradcheck_quadratic() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("theta", Tensor::from_f64([2], &[1.0, 2.0]).unwrap()).unwrap();
    let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let x = g.param(s, id);
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    };
    let mut g = Graph::new();
    let loss = f(&s, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.params().get(id).unwrap().data(), &[2.0, 4.0]);
    let report = finite_difference_check(f, &s, &[id], 1e-3).unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("logits", Tensor::from_f64([1, 3], &[0.2, -1.3, 0.7]).unwrap()).unwrap();
    let target = Tensor::from_f64([1, 3], &[0.0, 1.0, 0.0]).unwrap();
    let report = finite_difference_check(
        |s, g| {
            let x = g.param(s, id);
            let lp = g.log_softmax(x)?;
            let ll = g.dot_const(lp, &target)?;
            Ok(g.neg(ll))
        },
        &s,
        &[id],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn frozen_parameter_gets_zero_gradient() {
    let mut s = ParamStore::<f64>::new();
    let a = s.add("enc.w", Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    let b = s.add("head.w", Tensor::from_f64([3], &[1.0, 1.5, -0.5]).unwrap()).unwrap();
    assert_eq!(s.set_frozen("enc.", true), 1);
    let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
        let x = g.param(s, a);
        let y = g.param(s, b);
        let p = g.mul(x, y)?;
        Ok(g.sum(p))
    };
    let report = finite_difference_check(f, &s, &[a, b], 1e-3).unwrap();
    let enc = &report.params[0];
    assert!(enc.frozen && enc.max_rel_error.is_none());
    assert_eq!(enc.max_abs_analytic, 0.0);
    assert!(report.passes(1e-6));

    let mut g = Graph::new();
    let loss = f(&s, &mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.params().get(a).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn gradcheck_names_parameter_on_non_finite_loss() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("blowup", Tensor::from_f64([1], &[700.0]).unwrap()).unwrap();
    let err = finite_difference_check(
        |s, g| {
            let x = g.param(s, id);
            let e = g.exp(x);
            Ok(g.sum(e))
        },
        &s,
        &[id],
        10.0,
    )
    .unwrap_err();
    assert!(err.to_string().contains("blowup"), "{err}");
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(ks in prop::collection::vec(-1280i32..1280, 12), kc in -3200i32..3200) {
        // Multiples of 1/64 keep the shifted inputs exact in 32 bits.
        let xs: Vec<f64> = ks.iter().map(|&k| k as f64 / 64.0).collect();
        let c = kc as f64 / 64.0;
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let mut g = Graph::inference();
        let a = g.constant(t(&[3, 4], &xs));
        let b = g.constant(t(&[3, 4], &shifted));
        let ya = g.softmax(a, 1).unwrap();
        let yb = g.softmax(b, 1).unwrap();
        for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_is_linear_in_feature(
        fs in prop::collection::vec(-1.0f64..1.0, 24),
        pts in prop::collection::vec(-0.2f64..1.2, 10),
        alpha in -3.0f64..3.0,
    ) {
        let scaled: Vec<f64> = fs.iter().map(|v| v * alpha).collect();
        let a = sample(t(&[3, 4, 2], &fs), &pts);
        let b = sample(t(&[3, 4, 2], &scaled), &pts);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((*x as f64 * alpha - *y as f64).abs() < 1e-6);
        }
    }
}
