use oilcast::graph::pool_output_len;
use oilcast::rng;
use oilcast::{Graph, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn forward(x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, oilcast::Var) -> oilcast::Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    g.value(out).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(forward(t(&[2], &[0.0, 0.0]), |g, v| g.softmax(v, 0).unwrap()), vec![0.5, 0.5]);
    let p = forward(t(&[2], &[0.0, 3f64.ln()]), |g, v| g.softmax(v, 0).unwrap());
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15, "{p:?}");
}

#[test]
fn softmax_survives_huge_logits() {
    let p = forward(t(&[3], &[1000.0, 1000.0, -1000.0]), |g, v| g.softmax(v, 0).unwrap());
    assert_eq!(p, vec![0.5, 0.5, 0.0]);
}

#[test]
fn prefix_softmax_masks_future_exactly() {
    let p = forward(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]), |g, v| g.prefix_softmax(v, vec![0, 1]).unwrap());
    assert_eq!(&p[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(p[5], 0.0);
    assert!((p[3] + p[4] - 1.0).abs() < 1e-15);
}

#[test]
fn elu_endpoints() {
    let y = forward(t(&[3], &[0.0, -50.0, 2.5]), |g, v| g.elu(v));
    assert_eq!(y[0], 0.0);
    assert!((y[1] + 1.0).abs() < 1e-15);
    assert_eq!(y[2], 2.5);
}

#[test]
fn layer_norm_of_constant_row_is_bias() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[3.0; 4]));
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).is_finite());
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 6.0, -4.0, 0.0, 10.0]));
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for r in 0..2 {
        let row = g.value(y).row(r);
        let mean: f64 = row.iter().sum::<f64>() / 3.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn dropout_identity_cases_and_scaling() {
    let x = t(&[50], &[2.0; 50]);
    let mut r = rng::seeded(1);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    assert_eq!(g.dropout(v, 0.0, true, &mut r).unwrap(), v);
    assert_eq!(g.dropout(v, 0.5, false, &mut r).unwrap(), v);
    let d = g.dropout(v, 0.5, true, &mut r).unwrap();
    assert!(g.value(d).data().iter().all(|&y| y == 0.0 || y == 4.0));
    assert!(g.dropout(v, 1.0, true, &mut r).is_err());
    assert!(g.dropout(v, -0.1, true, &mut r).is_err());
}

#[test]
fn conv1d_identity_kernel() {
    let x = t(&[1, 5], &[1.0, -2.0, 3.0, 0.5, 7.0]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(t(&[1, 1, 1], &[1.0]));
    let y = g.conv1d(xv, k, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv1d_matches_direct_sum() {
    let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
    let k = t(&[1, 2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv1d(xv, kv, 1).unwrap();
    let at = |c: usize, i: isize| if (0..4).contains(&i) { x.get(c, i as usize) } else { 0.0 };
    for l in 0..4isize {
        let mut s = 0.0;
        for c in 0..2 {
            for w in 0..3isize {
                s += k.data()[c * 3 + w as usize] * at(c, l + w - 1);
            }
        }
        assert!((g.value(y).data()[l as usize] - s).abs() < 1e-15);
    }
}

#[test]
fn max_pool_examples() {
    let y = forward(t(&[1, 4], &[1.0, 3.0, 2.0, 5.0]), |g, v| g.max_pool1d(v, 2, 2, 0).unwrap());
    assert_eq!(y, vec![3.0, 5.0]);
    assert_eq!(pool_output_len(7, 3, 2, 1).unwrap(), 4);
    let y = forward(t(&[1, 3], &[-5.0, -6.0, -7.0]), |g, v| g.max_pool1d(v, 3, 2, 1).unwrap());
    assert_eq!(y, vec![-5.0, -6.0]);
}

#[test]
fn max_pool_rejects_window_beyond_input() {
    let mut g = Graph::new();
    let v = g.constant(t(&[1, 2], &[1.0, 2.0]));
    assert!(g.max_pool1d(v, 5, 1, 0).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 1..30)) {
        let n = values.len();
        let p = forward(t(&[n], &values), |g, v| g.softmax(v, 0).unwrap());
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(values in proptest::collection::vec(-5.0f64..5.0, 2..10), c in -50.0f64..50.0) {
        let n = values.len();
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let a = forward(t(&[n], &values), |g, v| g.softmax(v, 0).unwrap());
        let b = forward(t(&[n], &shifted), |g, v| g.softmax(v, 0).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_pool_halves_length(len in 1usize..300) {
        prop_assert_eq!(pool_output_len(len, 3, 2, 1).unwrap(), len.div_ceil(2));
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let a = rng::normal_tensor::<f64>(&mut r, &[m, k]);
        let b = rng::normal_tensor::<f64>(&mut r, &[k, n]);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| a.get(i, p) * b.get(p, j)).sum();
                prop_assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }
}
