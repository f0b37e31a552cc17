//! Independent checks of the network's forward and backward passes.

use fedtsa_core::label::StabilityLabel;
use fedtsa_core::neural::{loss, LayerSpec, ModelArch, ModelParams, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward nested-loop forward pass, indexing the flat parameter
/// vector through the public shape table only.
fn naive_forward(net: &Network, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = net.arch();
    let (mut h, mut w, mut c) = arch.input;
    let mut cur = x.to_vec();
    let seg = |layer: usize, name: &str| {
        net.segments()
            .iter()
            .find(|s| s.layer == layer && s.name == name)
            .unwrap()
            .clone()
    };
    for (li, layer) in arch.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { kernel: (kh, kw), filters } => {
                let (k, b) = (seg(li, "kernel"), seg(li, "bias"));
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let mut out = vec![0.0; oh * ow * filters];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for f in 0..*filters {
                            let mut s = params.values[b.offset + f];
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    for ci in 0..c {
                                        let wi = k.offset + ((f * kh + ky) * kw + kx) * c + ci;
                                        s += params.values[wi] * cur[((oy + ky) * w + ox + kx) * c + ci];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * filters + f] = if s > 0.0 { s } else { 0.0 };
                        }
                    }
                }
                (h, w, c) = (oh, ow, *filters);
                cur = out;
            }
            LayerSpec::MaxPool { kernel: (kh, kw), stride: (sh, sw) } => {
                let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            for ky in 0..*kh {
                                for kx in 0..*kw {
                                    let v = cur[((oy * sh + ky) * w + ox * sw + kx) * c + ch];
                                    let o = &mut out[(oy * ow + ox) * c + ch];
                                    if v > *o {
                                        *o = v;
                                    }
                                }
                            }
                        }
                    }
                }
                (h, w) = (oh, ow);
                cur = out;
            }
            LayerSpec::Dropout { .. } | LayerSpec::Flatten => {}
            LayerSpec::Dense { units, activation } => {
                let (wt, b) = (seg(li, "weight"), seg(li, "bias"));
                let inp = cur.len();
                let mut out = vec![0.0; *units];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut s = params.values[b.offset + o];
                    for (i, xi) in cur.iter().enumerate() {
                        s += params.values[wt.offset + o * inp + i] * xi;
                    }
                    *slot = match activation {
                        fedtsa_core::neural::Activation::Relu => s.max(0.0),
                        fedtsa_core::neural::Activation::Linear => s,
                    };
                }
                cur = out;
            }
            LayerSpec::Softmax => {
                let m = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cur.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                cur = e.iter().map(|v| v / z).collect();
            }
        }
    }
    cur
}

fn random_params(net: &Network, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let mut p = net.init_params(rng.gen());
    for v in &mut p.values {
        *v += scale * rng.gen_range(-1.0..1.0);
    }
    p
}

fn random_batch(n: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n * width).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn random_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<StabilityLabel> {
    (0..n).map(|_| StabilityLabel::ALL[rng.gen_range(0..5)]).collect()
}

#[test]
fn forward_matches_naive_implementation() {
    let net = Network::new(ModelArch::tsa_default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..3 {
        let params = random_params(&net, &mut rng, 0.05);
        let x = random_batch(7, 250, &mut rng);
        let probs = net.forward(&params, &x, 7).unwrap();
        for n in 0..7 {
            let oracle = naive_forward(&net, &params, &x[n * 250..(n + 1) * 250]);
            let row = &probs[n * 5..(n + 1) * 5];
            for (a, b) in row.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn train_pass_without_dropout_equals_inference() {
    let net = Network::new(ModelArch::tsa_default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_params(&net, &mut rng, 0.0);
    let x = random_batch(4, 250, &mut rng);
    let cache = net.forward_train(&params, &x, 4, None).unwrap();
    assert_eq!(cache.probabilities(), net.forward(&params, &x, 4).unwrap().as_slice());
}

#[test]
fn gradient_matches_finite_differences() {
    let net = Network::new(ModelArch::tsa(2, 2, 8, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    for draw in 0..5 {
        let params = random_params(&net, &mut rng, 0.3);
        let x = random_batch(3, 250, &mut rng);
        let labels = random_labels(3, &mut rng);
        let cache = net.forward_train(&params, &x, 3, None).unwrap();
        let grad = net.backward(&params, &cache, &labels, None).unwrap();
        let objective = |p: &ModelParams| loss(&net.forward(p, &x, 3).unwrap(), &labels, None).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..net.param_count() {
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "draw {draw}: max relative error {worst:.3e}");
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let net = Network::new(ModelArch::tsa(4, 4, 8, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = random_params(&net, &mut rng, 0.2);
    let x = random_batch(2, 250, &mut rng);
    let labels = random_labels(2, &mut rng);
    let g = |xs: &[f64], ls: &[StabilityLabel]| {
        let cache = net.forward_train(&params, xs, ls.len(), None).unwrap();
        net.backward(&params, &cache, ls, None).unwrap()
    };
    let both = g(&x, &labels);
    let a = g(&x[..250], &labels[..1]);
    let b = g(&x[250..], &labels[1..]);
    for i in 0..both.len() {
        // The loss is a batch mean, so the summed loss has gradient 2 × the mean's.
        assert!((2.0 * both[i] - (a[i] + b[i])).abs() < 1e-12);
    }
}

#[test]
fn zero_input_kills_kernel_gradients() {
    let net = Network::new(ModelArch::tsa_default()).unwrap();
    let params = net.init_params(4);
    let x = vec![0.0; 3 * 250];
    let labels = [StabilityLabel::Stable, StabilityLabel::Unstable, StabilityLabel::FaultDuration];
    let cache = net.forward_train(&params, &x, 3, None).unwrap();
    let grad = net.backward(&params, &cache, &labels, None).unwrap();
    for seg in net.segments().iter().filter(|s| s.name == "kernel") {
        assert!(grad[seg.offset..seg.offset + seg.len].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn weighted_gradient_scales() {
    let net = Network::new(ModelArch::tsa(2, 2, 8, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = random_params(&net, &mut rng, 0.2);
    let x = random_batch(2, 250, &mut rng);
    let labels = random_labels(2, &mut rng);
    let cache = net.forward_train(&params, &x, 2, None).unwrap();
    let plain = net.backward(&params, &cache, &labels, None).unwrap();
    let doubled = net.backward(&params, &cache, &labels, Some(&[2.0; 5])).unwrap();
    assert!(plain.iter().zip(&doubled).all(|(a, b)| (2.0 * a - b).abs() < 1e-15));
}

#[test]
fn dropout_preserves_expectation() {
    // Dropout is layer 3; its input is the pooled output (layer 2).
    let net = Network::new(ModelArch::tsa_default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = random_params(&net, &mut rng, 0.0);
    let one = random_batch(1, 250, &mut rng);
    let masks = 10_000;
    let x: Vec<f64> = one.iter().cycle().take(masks * 250).copied().collect();
    let cache = net.forward_train(&params, &x, masks, Some(&mut rng)).unwrap();
    let pooled = &cache.layer_output(2)[..256];
    let dropped = cache.layer_output(3);
    let rate = 0.2;
    let observed: f64 = dropped.iter().sum::<f64>() / masks as f64;
    let expected: f64 = pooled.iter().sum();
    let var_one: f64 = pooled.iter().map(|v| v * v).sum::<f64>() * rate / (1.0 - rate);
    let sigma = (var_one / masks as f64).sqrt();
    assert!(expected > 0.0);
    assert!((observed - expected).abs() < 3.0 * sigma, "{observed} vs {expected} (σ {sigma})");
    // Every kept unit is scaled by 1 / (1 − rate).
    for (d, p) in dropped.iter().zip(pooled.iter().cycle()) {
        assert!(*d == 0.0 || (d - p / (1.0 - rate)).abs() < 1e-12);
    }
}
