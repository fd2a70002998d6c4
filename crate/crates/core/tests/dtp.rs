mod common;

use common::*;
use credit::gradcheck::{compare, numeric_gradient};
use credit::network::ParamTree;
use credit::rules::{
    bp_backward, dtp_decoder_grads, dtp_forward_grads, dtp_targets, dtp_targets_from_top, Decoder, DecoderSet,
};
use credit::{forward, Activation, Family, ParameterSet, RngStream, Tensor};

fn all_zero(p: &impl ParamTree<f64>) -> bool {
    p.tensors().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

#[test]
fn unchanged_top_target_is_a_fixed_point() {
    for spec in [
        mlp(true, 4, 5, 6, 3, Activation::Sigmoid, 1),
        mlp(false, 3, 5, 6, 3, Activation::Relu, 2),
        conv(true, 3, 2, [1, 4, 4], 3, Activation::Sigmoid, 3),
    ] {
        let params = random_params(&spec, 4);
        let dec = DecoderSet::random(&spec, 5).unwrap();
        let trace = forward(&spec, &params, &batch(&spec, 3, 6)).unwrap();
        let top = trace.h(spec.depth).clone();
        let targets = dtp_targets_from_top(&spec, &dec, &trace, top, trace.logits.clone(), 0.5).unwrap();
        for l in 1..=spec.depth {
            assert_eq!(targets.get(l).unwrap(), trace.h(l), "layer {l}");
        }
        assert!(all_zero(&dtp_forward_grads(&spec, &params, &trace, &targets).unwrap()));

        // a zero step yields the same fixed point through the label path
        let y = labels(3, 3, 7);
        let targets = dtp_targets(&spec, &params, &dec, &trace, &y, 0.0).unwrap();
        for l in 1..=spec.depth {
            assert_eq!(targets.get(l).unwrap(), trace.h(l));
        }
        assert!(all_zero(&dtp_forward_grads(&spec, &params, &trace, &targets).unwrap()));
    }
}

#[test]
fn two_layer_chain_matches_hand_expansion() {
    let spec = mlp(false, 2, 3, 4, 2, Activation::Sigmoid, 10);
    let params = random_params(&spec, 11);
    let dec = DecoderSet::random(&spec, 12).unwrap();
    let trace = forward(&spec, &params, &batch(&spec, 2, 13)).unwrap();
    let top = RngStream::new(14).normal(trace.h(2).shape(), 0.3).unwrap().add(trace.h(2)).unwrap();
    let t = dtp_targets_from_top(&spec, &dec, &trace, top.clone(), trace.logits.clone(), 0.5).unwrap();
    let g = |h: &Tensor<f64>| dec.decode(Family::Mlp, 2, 1, h).unwrap();
    let want = trace.h(1).sub(&g(trace.h(2))).unwrap().add(&g(&top)).unwrap();
    assert_close(t.get(1).unwrap(), &want, 1e-15, "target 1");
}

/// `act(V h + c)` row by row.
fn decode_oracle(d: &Decoder<f64>, a: Activation, h: &[f64]) -> Vec<f64> {
    let v = rows(&d.weight);
    v.iter()
        .zip(d.bias.data())
        .map(|(row, c)| act(a, row.iter().zip(h).map(|(x, y)| x * y).sum::<f64>() + c))
        .collect()
}

#[test]
fn dense_targets_match_recursion_oracle() {
    let spec = mlp(true, 3, 4, 5, 3, Activation::Sigmoid, 20);
    let params = random_params(&spec, 21);
    let mut dec = DecoderSet::random(&spec, 22).unwrap();
    for (_, t) in dec.tensors_mut() {
        t.add_assign(&RngStream::new(23).normal(t.shape(), 0.2).unwrap()).unwrap();
    }
    let n = 3;
    let y = labels(n, 3, 24);
    let step = 0.7;
    let trace = forward(&spec, &params, &batch(&spec, n, 25)).unwrap();
    let targets = dtp_targets(&spec, &params, &dec, &trace, &y, step).unwrap();

    // top: h_3 - step * W_cls^T (softmax - onehot), per example
    let g_out: Vec<Vec<f64>> = xent_grad(&trace.logits, &y)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * n as f64).collect())
        .collect();
    let wc = rows(&params.classifier_weight);
    let h: Vec<Vec<Vec<f64>>> = (0..=3).map(|l| rows(trace.h(l))).collect();
    let mut hat: Vec<Vec<Vec<f64>>> = vec![vec![]; 4];
    hat[3] = (0..n)
        .map(|s| {
            (0..4)
                .map(|u| h[3][s][u] - step * (0..3).map(|c| wc[c][u] * g_out[s][c]).sum::<f64>())
                .collect()
        })
        .collect();
    for l in (1..3).rev() {
        hat[l] = (0..n)
            .map(|s| {
                let mut t = h[l][s].clone();
                for j in (l + 1)..=3 {
                    let d = dec.get(j, l).unwrap();
                    let a = decode_oracle(d, spec.activation, &h[j][s]);
                    let b = decode_oracle(d, spec.activation, &hat[j][s]);
                    for u in 0..t.len() {
                        t[u] -= a[u] - b[u];
                    }
                }
                t
            })
            .collect();
    }
    for l in 1..=3 {
        let got = rows(targets.get(l).unwrap());
        for s in 0..n {
            for u in 0..4 {
                let (a, b) = (got[s][u], hat[l][s][u]);
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "target {l}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn local_loss_gradient_matches_finite_differences() {
    let spec = mlp(false, 1, 4, 3, 2, Activation::Identity, 30);
    let mut params = random_params(&spec, 31);
    let x = batch(&spec, 4, 32);
    let trace = forward(&spec, &params, &x).unwrap();
    let mut targets = dtp_targets_from_top(
        &spec,
        &DecoderSet::zeros(&spec).unwrap(),
        &trace,
        trace.h(1).clone(),
        trace.logits.clone(),
        0.5,
    )
    .unwrap();
    let shifted = RngStream::new(33).normal(trace.h(1).shape(), 0.5).unwrap().add(trace.h(1)).unwrap();
    targets.targets.insert(1, shifted.clone());
    let analytic = dtp_forward_grads(&spec, &params, &trace, &targets).unwrap();

    let loss = |p: &ParameterSet<f64>| -> credit::Result<f64> {
        let h = forward(&spec, p, &x)?;
        let e = h.h(1).sub(&shifted)?;
        Ok(e.dot(&e)? / x.rows() as f64)
    };
    let mut numeric = numeric_gradient(&mut params, 1e-5, loss).unwrap();
    // the local loss does not involve the classifier
    numeric.classifier_weight = analytic.classifier_weight.clone();
    numeric.classifier_bias = analytic.classifier_bias.clone();
    let r = compare(&analytic, &numeric, 1e-6, 1e-8).unwrap();
    assert!(r.passed(), "{:?}", r.failures);
}

#[test]
fn classifier_follows_the_true_output_gradient() {
    let spec = mlp(true, 3, 4, 5, 3, Activation::Sigmoid, 40);
    let params = random_params(&spec, 41);
    let trace = forward(&spec, &params, &batch(&spec, 4, 42)).unwrap();
    let y = labels(4, 3, 43);
    let dec = DecoderSet::random(&spec, 44).unwrap();
    let targets = dtp_targets(&spec, &params, &dec, &trace, &y, 0.3).unwrap();
    let dtp = dtp_forward_grads(&spec, &params, &trace, &targets).unwrap();
    let bp = bp_backward(&spec, &params, &trace, &y).unwrap();
    assert_close(&dtp.classifier_weight, &bp.classifier_weight, 1e-12, "classifier.w");
    assert_close(&dtp.classifier_bias, &bp.classifier_bias, 1e-12, "classifier.b");
}

#[test]
fn layer_gradient_ignores_lower_layer_parameters() {
    let spec = mlp(true, 3, 4, 5, 3, Activation::Sigmoid, 50);
    let params = random_params(&spec, 51);
    let trace = forward(&spec, &params, &batch(&spec, 3, 52)).unwrap();
    let dec = DecoderSet::random(&spec, 53).unwrap();
    let targets = dtp_targets(&spec, &params, &dec, &trace, &labels(3, 3, 54), 0.5).unwrap();
    let base = dtp_forward_grads(&spec, &params, &trace, &targets).unwrap();

    let l = 3;
    let mut perturbed = params.clone();
    let mut rng = RngStream::new(55);
    for (&(dest, _), w) in perturbed.weights.iter_mut() {
        if dest < l {
            w.add_assign(&rng.normal(w.shape(), 1.0).unwrap()).unwrap();
        }
    }
    for (&dest, b) in perturbed.biases.iter_mut() {
        if dest < l {
            b.add_assign(&rng.normal(b.shape(), 1.0).unwrap()).unwrap();
        }
    }
    let again = dtp_forward_grads(&spec, &perturbed, &trace, &targets).unwrap();
    for j in spec.sources(l) {
        assert_eq!(base.weight(l, j).unwrap(), again.weight(l, j).unwrap());
    }
    assert_eq!(base.bias(l).unwrap(), again.bias(l).unwrap());
}

#[test]
fn perfect_inverse_decoder_has_zero_gradient() {
    let spec = mlp(false, 2, 2, 3, 2, Activation::Identity, 60);
    let mut params = random_params(&spec, 61);
    // W_{2,1} = [[2, 1], [1, 1]], inverse [[1, -1], [-1, 2]]
    *params.weights.get_mut(&(2, 1)).unwrap() = Tensor::from_f64(&[2, 2], &[2.0, 1.0, 1.0, 1.0]).unwrap();
    *params.biases.get_mut(&2).unwrap() = Tensor::from_f64(&[2], &[0.5, -0.25]).unwrap();
    let trace = forward(&spec, &params, &batch(&spec, 3, 62)).unwrap();
    let mut dec = DecoderSet::zeros(&spec).unwrap();
    // g(h) = W^-1 h - W^-1 b
    let d = dec.decoders.get_mut(&(2, 1)).unwrap();
    d.weight = Tensor::from_f64(&[2, 2], &[1.0, -1.0, -1.0, 2.0]).unwrap();
    d.bias = Tensor::from_f64(&[2], &[-0.75, 1.0]).unwrap();
    let g = dtp_decoder_grads(&spec, &params, &dec, &trace, 0.0, &mut RngStream::new(0)).unwrap();
    for (name, t) in g.tensors() {
        assert!(t.data().iter().all(|v| v.abs() < 1e-14), "{name}: {:?}", t.data());
    }
}

#[test]
fn scalar_decoder_gradient_matches_finite_differences() {
    let spec = mlp(false, 2, 1, 1, 2, Activation::Identity, 70);
    let params = random_params(&spec, 71);
    let n = 4;
    let trace = forward(&spec, &params, &batch(&spec, n, 72)).unwrap();
    let mut dec = DecoderSet::random(&spec, 73).unwrap();
    dec.decoders.get_mut(&(2, 1)).unwrap().bias = Tensor::from_f64(&[1], &[0.3]).unwrap();
    let noise_std = 0.1;
    let seed = 74;
    let analytic = dtp_decoder_grads(&spec, &params, &dec, &trace, noise_std, &mut RngStream::new(seed)).unwrap();

    let eps: Vec<f64> = RngStream::new(seed).noise::<f64>(&[n, 1], noise_std).unwrap().data().to_vec();
    let w = params.weight(2, 1).unwrap().data()[0];
    let b = params.bias(2).unwrap().data()[0];
    let h1: Vec<f64> = trace.h(1).data().to_vec();
    // mean_b (v (w c + b) + c' - c)^2 with c = h1 + eps
    let loss = |d: &DecoderSet<f64>| -> credit::Result<f64> {
        let dd = d.get(2, 1)?;
        let (v, cp) = (dd.weight.data()[0], dd.bias.data()[0]);
        Ok((0..n)
            .map(|s| {
                let c = h1[s] + eps[s];
                (v * (w * c + b) + cp - c).powi(2)
            })
            .sum::<f64>()
            / n as f64)
    };
    let numeric = numeric_gradient(&mut dec, 1e-5, loss).unwrap();
    let r = compare(&analytic, &numeric, 1e-6, 1e-8).unwrap();
    assert!(r.passed(), "{:?}", r.failures);
}

#[test]
fn decoder_gradients_are_seed_deterministic() {
    let spec = mlp(true, 3, 4, 5, 3, Activation::Sigmoid, 80);
    let params = random_params(&spec, 81);
    let trace = forward(&spec, &params, &batch(&spec, 3, 82)).unwrap();
    let dec = DecoderSet::random(&spec, 83).unwrap();
    let a = dtp_decoder_grads(&spec, &params, &dec, &trace, 0.1, &mut RngStream::new(9)).unwrap();
    let b = dtp_decoder_grads(&spec, &params, &dec, &trace, 0.1, &mut RngStream::new(9)).unwrap();
    let c = dtp_decoder_grads(&spec, &params, &dec, &trace, 0.1, &mut RngStream::new(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn missing_decoder_is_an_error() {
    let spec = mlp(true, 3, 4, 5, 3, Activation::Sigmoid, 90);
    let params = random_params(&spec, 91);
    let trace = forward(&spec, &params, &batch(&spec, 2, 92)).unwrap();
    let mut dec = DecoderSet::random(&spec, 93).unwrap();
    dec.decoders.remove(&(3, 1));
    assert!(dtp_targets(&spec, &params, &dec, &trace, &[0, 1], 0.5).is_err());
}
