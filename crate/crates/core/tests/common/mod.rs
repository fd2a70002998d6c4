#![allow(dead_code)]

use credit::network::ParamTree;
use credit::{build_network, Activation, Family, NetworkSpec, ParameterSet, RngStream, Tensor};

pub fn mlp(dense: bool, depth: usize, width: usize, inputs: usize, classes: usize, act: Activation, seed: u64) -> NetworkSpec {
    let mut s = NetworkSpec::mnist(Family::Mlp, dense, depth, act);
    s.hidden_units = width;
    s.input_shape = vec![inputs];
    s.num_classes = classes;
    s.init_seed = seed;
    s
}

pub fn conv(dense: bool, depth: usize, channels: usize, input: [usize; 3], classes: usize, act: Activation, seed: u64) -> NetworkSpec {
    let mut s = NetworkSpec::mnist(Family::Conv, dense, depth, act);
    s.channels_per_layer = channels;
    s.input_shape = input.to_vec();
    s.num_classes = classes;
    s.init_seed = seed;
    s
}

/// Initialized parameters with every tensor (biases included) shifted by
/// small Gaussian noise so no entry sits at an exact zero.
pub fn random_params(spec: &NetworkSpec, seed: u64) -> ParameterSet<f64> {
    let mut p: ParameterSet<f64> = build_network(spec).unwrap();
    let mut rng = RngStream::new(seed ^ 0x5eed);
    for (_, t) in p.tensors_mut() {
        let noise: Tensor<f64> = rng.normal(t.shape(), 0.1).unwrap();
        t.add_assign(&noise).unwrap();
    }
    p
}

pub fn batch(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor<f64> {
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    RngStream::new(seed).normal(&shape, 1.0).unwrap()
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| (rng.next_u64() % classes as u64) as usize).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Sigmoid => sigmoid(x),
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
        Activation::Softmax => unimplemented!("not a hidden activation"),
    }
}

pub fn act_deriv(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Sigmoid => sigmoid(x) * (1.0 - sigmoid(x)),
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
        Activation::Softmax => unimplemented!("not a hidden activation"),
    }
}

/// Row-major `[rows][cols]` view of a 2-d tensor.
pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `|a - b| <= tol * max(1, |a|, |b|)` entrywise.
pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let scale = 1f64.max(x.abs()).max(y.abs());
        assert!((x - y).abs() <= tol * scale, "{what}[{i}]: {x} vs {y}");
    }
}

/// Naive softmax cross-entropy gradient w.r.t. logits, batch mean.
pub fn xent_grad(logits: &Tensor<f64>, labels: &[usize]) -> Vec<Vec<f64>> {
    let b = labels.len() as f64;
    rows(logits)
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            z.iter()
                .enumerate()
                .map(|(k, v)| ((v - m).exp() / s - if k == y { 1.0 } else { 0.0 }) / b)
                .collect()
        })
        .collect()
}

/// MNIST-shaped data labeled by a fixed random linear teacher, so it is
/// learnable but needs no files.
pub fn synthetic_splits(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> credit::Splits<f64> {
    let mut rng = RngStream::new(seed);
    let teacher: Tensor<f64> = rng.normal(&[10, 784], 1.0).unwrap();
    let mut make = |n: usize| {
        let images = Tensor::from_fn(&[n, 1, 28, 28], |_| (rng.next_u64() % 256) as f64 / 255.0).unwrap();
        let labels = (0..n)
            .map(|i| {
                let x = images.row(i);
                (0..10)
                    .map(|c| teacher.row(c).iter().zip(x).map(|(a, b)| a * (b - 0.5)).sum::<f64>())
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect();
        credit::Dataset::new(images, labels).unwrap()
    };
    credit::Splits {
        train: make(n_train),
        val: make(n_val),
        test: make(n_test),
    }
}
