use super::rng::{RngStream, StreamPurpose};
use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, StreamPurpose::WeightInit);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn central_diff(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(1e-12f64, |m, v| m.max(v.abs()));
    analytic.max_abs_diff(numeric) / scale
}

#[test]
fn conv_of_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), [1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_padding_preserves_size() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let w = g.constant(Tensor::zeros(&[16, 3, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.shape(y), [1, 16, 32, 32]);
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let msg = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
    assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x0 = random(&[1, 2, 5, 5], 1);
    let w0 = random(&[3, 2, 3, 3], 2);
    let r = random(&[1, 3, 3, 3], 3);
    let loss = |x: &Tensor, w: &Tensor| {
        let mut g = Graph::new();
        let (xv, wv, rv) = (g.param(x.clone()), g.param(w.clone()), g.constant(r.clone()));
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let p = g.mul(y, rv).unwrap();
        let s = g.sum(p);
        (g, xv, wv, s)
    };
    let (mut g, xv, wv, s) = loss(&x0, &w0);
    g.backward(s).unwrap();
    let nx = central_diff(&x0, 1e-5, |x| {
        let (g, _, _, s) = loss(x, &w0);
        g.value(s).item()
    });
    let nw = central_diff(&w0, 1e-5, |w| {
        let (g, _, _, s) = loss(&x0, w);
        g.value(s).item()
    });
    assert!(rel_err(g.grad(xv).unwrap(), &nx) < 1e-6);
    assert!(rel_err(g.grad(wv).unwrap(), &nw) < 1e-6);
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap());
    let r = g.activation("relu".parse().unwrap(), x);
    assert_eq!(g.value(r).data()[0], 0.0);
    let s = g.activation(Activation::Sigmoid, x);
    assert_eq!(g.value(s).data()[1], 0.5);
    let total = g.sum(s);
    g.backward(total).unwrap();
    let analytic = g.grad(x).unwrap().data()[1];
    assert!((analytic - 0.25).abs() < 1e-15);
    let h = 1e-5;
    let fd = (super::graph::sigmoid(h) - super::graph::sigmoid(-h)) / (2.0 * h);
    assert!((analytic - fd).abs() < 1e-8);
    assert!("tanh".parse::<Activation>().is_err());
}

#[test]
fn global_max_pool_and_ties() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap());
    let m = g.global_max_pool(x).unwrap();
    assert_eq!(g.value(m).data(), [3.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap());
    let m = g.global_max_pool(x).unwrap();
    assert_eq!(g.value(m).data(), [5.0]);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_max_pool_matches_scan() {
    let t = random(&[3, 4, 4], 11);
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let m = g.global_max_pool(x).unwrap();
    for c in 0..3 {
        let scan = t.data()[c * 16..(c + 1) * 16]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(g.value(m).data()[c], scan);
    }
}

#[test]
fn pooling_rejects_empty_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0, 3]));
    assert!(g.global_max_pool(x).is_err());
    let y = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    assert!(g.max_pool2d(y, 2).is_err());
}

#[test]
fn max_pool2d_floor_and_gradient() {
    let t = Tensor::from_fn(&[1, 1, 5, 5], |i| ((i * 7) % 11) as f64);
    let mut g = Graph::new();
    let x = g.param(t.clone());
    let y = g.max_pool2d(x, 2).unwrap();
    assert_eq!(g.shape(y), [1, 1, 2, 2]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.data().iter().sum::<f64>(), 4.0);
    for oy in 0..2 {
        for ox in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(t.data()[(oy * 2 + dy) * 5 + ox * 2 + dx]);
                }
            }
            assert_eq!(g.value(y).data()[oy * 2 + ox], best);
        }
    }
}

#[test]
fn dropout_modes() {
    let t = random(&[4, 8], 5);
    let mut rng = RngStream::new(0, StreamPurpose::Dropout);
    for mode in [DropoutMode::Train, DropoutMode::McActive, DropoutMode::Off] {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.dropout(x, 0.0, mode, &mut rng).unwrap();
        assert_eq!(g.value(y), &t);
    }
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = g.dropout(x, 0.5, DropoutMode::Off, &mut rng).unwrap();
    assert_eq!(g.value(y), &t);
    assert!(g.dropout(x, 1.0, DropoutMode::Train, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, DropoutMode::Train, &mut rng).is_err());
}

#[test]
fn dropout_masks_replay_and_keep_half() {
    let ones = Tensor::ones(&[100_000]);
    let run = || {
        let mut rng = RngStream::new(99, StreamPurpose::Dropout);
        let mut g = Graph::new();
        let x = g.constant(ones.clone());
        let y = g.dropout(x, 0.5, DropoutMode::McActive, &mut rng).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let kept = a.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    assert!((0.495..=0.505).contains(&kept), "kept {kept}");
    assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dense_identity_bias_and_naive() {
    let x0 = random(&[3, 4], 6);
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let y = g.dense(x, eye, None).unwrap();
    assert_eq!(g.value(y), &x0);

    let zero = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
    let y = g.dense(x, zero, Some(b)).unwrap();
    for row in g.value(y).data().chunks(2) {
        assert_eq!(row, [0.5, -1.5]);
    }

    let w0 = random(&[4, 5], 7);
    let w = g.constant(w0.clone());
    let y = g.dense(x, w, None).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += x0.data()[i * 4 + k] * w0.data()[k * 5 + j];
            }
            assert!((g.value(y).data()[i * 5 + j] - acc).abs() < 1e-12);
        }
    }
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.dense(x, bad, None).is_err());
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
    assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let l = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(g.value(ce).item().abs() < 1e-300 + 1e-12);
    assert!(g.value(ce).item().is_finite());

    assert!(g.softmax_cross_entropy(l, &[2]).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = random(&[4, 3], 8);
    let labels = [0, 2, 1, 2];
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.softmax_cross_entropy(l, &labels).unwrap();
    let mut direct = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += -(row[y].exp() / z).ln();
    }
    direct /= 4.0;
    assert!((g.value(ce).item() - direct).abs() < 1e-10);
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [1.0, 1.0]);
    assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));

    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarBackward(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[2]));
    let w = g.param(Tensor::ones(&[2]));
    let y = g.mul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap().data(), [1.0, 1.0]);
}

#[test]
fn patch_distance_and_similarity() {
    let z0 = random(&[1, 3, 3, 3], 21);
    let p0 = random(&[2, 3, 1, 1], 22);
    let mut g = Graph::new();
    let z = g.constant(z0.clone());
    let p = g.constant(p0.clone());
    let d = g.patch_distances(z, p).unwrap();
    assert_eq!(g.shape(d), [1, 2, 3, 3]);
    for j in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                let mut acc = 0.0;
                for c in 0..3 {
                    let diff = z0.data()[(c * 3 + y) * 3 + x] - p0.data()[j * 3 + c];
                    acc += diff * diff;
                }
                assert!((g.value(d).data()[(j * 3 + y) * 3 + x] - acc).abs() < 1e-12);
            }
        }
    }
    let s = g.similarity(d, 1e-4).unwrap();
    assert!(g.value(s).data().iter().all(|v| v.is_finite()));
    let neg = g.constant(Tensor::new(vec![1], vec![-1.0]).unwrap());
    assert!(g.similarity(neg, 1e-4).is_err());
}
