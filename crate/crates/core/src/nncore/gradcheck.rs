use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds the graph for the given leaf values and returns the output node.
type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

struct Case {
    lengths: Vec<usize>,
    frames: usize,
    /// Leaves; index 0 is the time-series input.
    leaves: Vec<Tensor<f64>>,
}

fn run(case: &Case, leaves: &[Tensor<f64>], weights: &[f64], build: &Build) -> (f64, Option<Gradients<f64>>, Vec<NodeId>) {
    let mut g = Graph::new(case.lengths.clone(), case.frames).unwrap();
    let mut ids = vec![g.input(leaves[0].clone()).unwrap()];
    // make the input differentiable by routing it through a leaf
    ids[0] = g.leaf(g.value(ids[0]).clone(), true).unwrap();
    for l in &leaves[1..] {
        ids.push(g.leaf(l.clone(), true).unwrap());
    }
    let out = build(&mut g, &ids);
    let y = g.value(out).data();
    let loss: f64 = y.iter().zip(weights).map(|(a, b)| a * b).sum();
    let l = g.external_loss(out, loss, weights[..y.len()].to_vec()).unwrap();
    let grads = g.backward(l).unwrap();
    (loss, Some(grads), ids)
}

fn gradcheck(case: Case, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grads, ids) = run(&case, &case.leaves, &weights, build);
    let grads = grads.unwrap();
    for (li, leaf) in case.leaves.iter().enumerate() {
        let analytic = grads.get(ids[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..leaf.len() {
            let mut plus = case.leaves.clone();
            plus[li].data_mut()[i] += H;
            let mut minus = case.leaves.clone();
            minus[li].data_mut()[i] -= H;
            let fp = run(&case, &plus, &weights, build).0;
            let fm = run(&case, &minus, &weights, build).0;
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            assert!(rel < 1e-6, "leaf {li} coord {i}: analytic {a} numeric {numeric} rel {rel}");
        }
    }
}

fn case(lengths: Vec<usize>, frames: usize, c: usize, extra: &[&[usize]]) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut leaves = vec![random(&[lengths.len(), frames, c], &mut rng)];
    for s in extra {
        leaves.push(random(s, &mut rng));
    }
    Case { lengths, frames, leaves }
}

#[test]
fn linear_gradients() {
    gradcheck(case(vec![4, 2], 4, 3, &[&[3, 2], &[2]]), &|g, ids| g.linear(ids[0], ids[1], Some(ids[2])).unwrap());
}

#[test]
fn conv_gradients() {
    let geom = ConvGeometry::new(3, 4, 2, 2, 2).unwrap();
    gradcheck(case(vec![6, 4], 6, 4, &[&geom.weight_shape(), &[2]]), &move |g, ids| {
        g.conv(ids[0], ids[1], Some(ids[2]), geom).unwrap()
    });
}

#[test]
fn depthwise_conv_gradients() {
    let geom = ConvGeometry::depthwise(3, 3, 1).unwrap();
    gradcheck(case(vec![5, 5], 5, 3, &[&geom.weight_shape()]), &move |g, ids| g.conv(ids[0], ids[1], None, geom).unwrap());
}

#[test]
fn batchnorm_train_gradients() {
    gradcheck(case(vec![4, 3], 4, 2, &[&[2], &[2]]), &|g, ids| {
        let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
        g.batchnorm_train(ids[0], ids[1], ids[2], &mut m, &mut v).unwrap()
    });
}

#[test]
fn batchnorm_infer_gradients() {
    gradcheck(case(vec![3, 2], 3, 2, &[&[2], &[2]]), &|g, ids| {
        g.batchnorm_infer(ids[0], ids[1], ids[2], &[0.3, -0.2], &[0.5, 2.0]).unwrap()
    });
}

#[test]
fn activation_gradients() {
    gradcheck(case(vec![3, 2], 3, 3, &[]), &|g, ids| {
        let r = g.relu(ids[0]).unwrap();
        let s = g.sigmoid(ids[0]).unwrap();
        g.add(r, s).unwrap()
    });
}

#[test]
fn concat_gradients() {
    gradcheck(case(vec![2], 2, 2, &[&[2, 1], &[2, 1], &[1], &[1]]), &|g, ids| {
        let w = g.concat(&[ids[1], ids[2]]).unwrap();
        let b = g.concat(&[ids[3], ids[4]]).unwrap();
        g.linear(ids[0], w, Some(b)).unwrap()
    });
}

fn graph_with_input(lengths: Vec<usize>, frames: usize, c: usize, seed: u64) -> (Graph<f64>, NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(lengths.clone(), frames).unwrap();
    let x = g.input(random(&[lengths.len(), frames, c], &mut rng)).unwrap();
    (g, x)
}

#[test]
fn padded_frames_get_no_gradient() {
    let (mut g, x0) = graph_with_input(vec![4, 2], 4, 2, 3);
    let x = g.leaf(g.value(x0).clone(), true).unwrap();
    let w = g.leaf(Tensor::full(&[3, 2, 2], 0.5), true).unwrap();
    let geom = ConvGeometry::new(3, 2, 2, 1, 1).unwrap();
    let y = g.conv(x, w, None, geom).unwrap();
    let n = g.value(y).len();
    let l = g.external_loss(y, 0.0, vec![1.0; n]).unwrap();
    let grads = g.backward(l).unwrap();
    let dx = grads.get(x).unwrap().data();
    assert!(dx[(4 + 2) * 2..].iter().all(|&v| v == 0.0));
    assert!(g.value(y).data()[(4 + 2) * 2..].iter().all(|&v| v == 0.0));
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let (mut g, x) = graph_with_input(vec![2], 2, 2, 1);
    let w = g.leaf(Tensor::full(&[2, 1], 0.5), true).unwrap();
    let unused = g.leaf(Tensor::full(&[2, 1], 0.5), true).unwrap();
    let y = g.linear(x, w, None).unwrap();
    let l = g.external_loss(y, 0.0, vec![1.0; 2]).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(unused).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let (mut g, x) = graph_with_input(vec![3], 3, 2, 9);
    let w = g.leaf(Tensor::from_vec(&[2, 2], vec![0.1, -0.4, 0.3, 0.8]).unwrap(), true).unwrap();
    let y = g.linear(x, w, None).unwrap();
    let s = g.sigmoid(y).unwrap();
    let ga: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
    let gb: Vec<f64> = (0..6).map(|i| 1.0 - i as f64 * 0.3).collect();
    let sum: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
    let la = g.external_loss(s, 0.0, ga).unwrap();
    let lb = g.external_loss(s, 0.0, gb).unwrap();
    let ls = g.external_loss(s, 0.0, sum).unwrap();
    let da = g.backward(la).unwrap().get(w).unwrap().clone();
    let db = g.backward(lb).unwrap().get(w).unwrap().clone();
    let ds = g.backward(ls).unwrap().get(w).unwrap().clone();
    for i in 0..4 {
        assert!((da.data()[i] + db.data()[i] - ds.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn backward_without_forward_fails() {
    let g = Graph::<f32>::new(vec![1], 1).unwrap();
    let mut other = Graph::<f32>::new(vec![1], 1).unwrap();
    let id = other.leaf(Tensor::scalar(1.0), true).unwrap();
    assert!(matches!(g.backward(id), Err(crate::Error::GraphNotRecorded)));
}

#[test]
fn batchnorm_train_normalises_valid_frames() {
    let (mut g, x) = graph_with_input(vec![7, 4, 5], 7, 3, 2);
    let gamma = g.leaf(Tensor::full(&[3], 1.0), true).unwrap();
    let beta = g.leaf(Tensor::zeros(&[3]), true).unwrap();
    let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
    let y = g.batchnorm_train(x, gamma, beta, &mut m, &mut v).unwrap();
    let lengths = [7, 4, 5];
    for ch in 0..3 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..lengths[b]).map(move |t| (b, t)))
            .map(|(b, t)| g.value(y).data()[(b * 7 + t) * 3 + ch])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    assert!(m.iter().any(|&v| v != 0.0));
}

#[test]
fn batchnorm_infer_identity() {
    let (mut g, x) = graph_with_input(vec![3], 3, 2, 4);
    let gamma = g.leaf(Tensor::full(&[2], 1.0), false).unwrap();
    let beta = g.leaf(Tensor::zeros(&[2]), false).unwrap();
    let var = 1.0 - BN_EPS;
    let y = g.batchnorm_infer(x, gamma, beta, &[0.0, 0.0], &[var, var]).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn linear_identity_and_zero_input() {
    let (mut g, x) = graph_with_input(vec![2], 2, 2, 8);
    let eye = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false).unwrap();
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let mut g = Graph::<f64>::new(vec![2], 2).unwrap();
    let z = g.input(Tensor::zeros(&[1, 2, 2])).unwrap();
    let w = g.leaf(Tensor::full(&[2, 3], 0.7), false).unwrap();
    let b = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), false).unwrap();
    let y = g.linear(z, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn dimension_mismatch_reported() {
    let (mut g, x) = graph_with_input(vec![2], 2, 3, 8);
    let w = g.leaf(Tensor::zeros(&[2, 2]), false).unwrap();
    assert!(matches!(g.linear(x, w, None), Err(crate::Error::DimensionMismatch(_))));
}

#[test]
fn forward_is_independent_of_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let geom = ConvGeometry::new(3, 4, 4, 2, 1).unwrap();
    let w = random(&geom.weight_shape(), &mut rng);
    let xs: Vec<Tensor<f64>> = (0..20).map(|_| random(&[1, 9, 4], &mut rng)).collect();
    let single: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut g = Graph::new(vec![9], 9).unwrap();
            let xi = g.input(x.clone()).unwrap();
            let wi = g.leaf(w.clone(), false).unwrap();
            let y = g.conv(xi, wi, None, geom).unwrap();
            g.value(y).data().to_vec()
        })
        .collect();
    let mut all = Vec::new();
    for x in &xs {
        all.extend_from_slice(x.data());
    }
    let mut g = Graph::new(vec![9; 20], 9).unwrap();
    let xi = g.input(Tensor::from_vec(&[20, 9, 4], all).unwrap()).unwrap();
    let wi = g.leaf(w, false).unwrap();
    let y = g.conv(xi, wi, None, geom).unwrap();
    for (b, s) in single.iter().enumerate() {
        assert_eq!(&g.value(y).data()[b * 36..(b + 1) * 36], &s[..]);
    }
}

#[test]
fn non_finite_values_trip() {
    let mut g = Graph::<f32>::new(vec![1], 1).unwrap();
    let x = g.input(Tensor::full(&[1, 1, 1], 1.0)).unwrap();
    let w = g.leaf(Tensor::full(&[1, 1], f32::MAX), false).unwrap();
    let y = g.linear(x, w, None).unwrap();
    assert!(matches!(g.add(y, y), Err(crate::Error::NonFiniteValue(_))));
}
