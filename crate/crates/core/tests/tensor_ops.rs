use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xres::tensor::{finite_diff_check, GradCheckOptions, GraphObjective, NormMode, RunningStats};
use xres::{Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4("oracle").unwrap();
    let [cout, _, kh, kw] = w.dims4("oracle").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loops_on_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, 2, 1).unwrap();
    let want = conv_oracle(&x, &w, 2, 1);
    assert_eq!(g.value(y).shape(), &[1, 3, 3, 3]);
    assert!(g.value(y).max_abs_diff(&want) <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..7, w in 1usize..7, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, stride, pad);
        prop_assert_eq!(g.value(y).shape(), want.shape());
        prop_assert!(g.value(y).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn forward_ops_stay_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut stats = RunningStats::new(3);
        let x = g.constant(random(&[2, 3, 4, 4], &mut rng).map(|v| v * 50.0));
        let w = g.constant(random(&[3, 3, 3, 3], &mut rng));
        let gamma = g.constant(random(&[3], &mut rng));
        let beta = g.constant(random(&[3], &mut rng));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let y = g.batch_norm(y, gamma, beta, NormMode::Train(&mut stats)).unwrap();
        let t = g.tanh(y).unwrap();
        let s = g.sigmoid(y).unwrap();
        let r = g.relu(y).unwrap();
        let p = g.maxpool(r, 3, 2, 1).unwrap();
        let a = g.global_avgpool(p).unwrap();
        let fw = g.constant(random(&[5, 3], &mut rng));
        let z = g.linear(a, fw, None).unwrap();
        let l = g.softmax_cross_entropy(z, &[0, 4]).unwrap();
        for v in [t, s, p, a, z, l] {
            prop_assert!(g.value(v).is_finite());
        }
    }
}

#[test]
fn batch_norm_normalized_input_passes_through() {
    // each channel holds ±1 pairs: mean 0, biased variance 1
    let x = Tensor::from_fn([2, 2, 2, 2], |i| if (i / 2 + i) % 2 == 0 { 1.0 } else { -1.0 });
    let mut g = Graph::new();
    let mut stats = RunningStats::new(2);
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::ones([2]));
    let beta = g.constant(Tensor::zeros([2]));
    let y = g.batch_norm(xv, gamma, beta, NormMode::Train(&mut stats)).unwrap();
    assert!(g.value(y).max_abs_diff(&x) <= 1e-4);
}

#[test]
fn batch_norm_matches_two_pass_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4, 3, 2], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    let mut g = Graph::new();
    let mut stats = RunningStats::new(4);
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let y = g.batch_norm(xv, gv, bv, NormMode::Train(&mut stats)).unwrap();

    let (n, c, hw) = (3, 4, 6);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..hw).map(move |k| (b, k)))
            .map(|(b, k)| x.data()[(b * c + ch) * hw + k])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for k in 0..hw {
                let i = (b * c + ch) * hw + k;
                let want = gamma.data()[ch] * (x.data()[i] - mean) / (var + 1e-5).sqrt() + beta.data()[ch];
                assert!((g.value(y).data()[i] - want).abs() <= 1e-12);
            }
        }
        assert!((stats.mean[ch] - 0.1 * mean).abs() <= 1e-12);
    }
}

#[test]
fn channel_scale_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let a = random(&[3], &mut rng);
    let mut g = Graph::new();
    let (xv, av) = (g.constant(x.clone()), g.constant(a.clone()));
    let y = g.channel_scale(xv, av).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for k in 0..4 {
                let i = (n * 3 + c) * 4 + k;
                assert_eq!(g.value(y).data()[i], a.data()[c] * x.data()[i]);
            }
        }
    }
}

fn check<F>(params: Vec<Tensor<f64>>, build: F) -> f64
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> xres::Result<Var>,
{
    let mut obj = GraphObjective::new(build);
    let report = finite_diff_check(&mut obj, &params, &GradCheckOptions::default()).unwrap();
    report.max_rel_error().max(report.max_entry_rel_error())
}

/// Weighted sum, so every output element gets a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> xres::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn gradients_of_pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // keep relu inputs away from the kink at zero
    let x = random(&[3, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for (i, op) in ["relu", "tanh", "sigmoid"].into_iter().enumerate() {
        let err = check(vec![x.clone()], |g, p| {
            let y = match op {
                "relu" => g.relu(p[0])?,
                "tanh" => g.tanh(p[0])?,
                _ => g.sigmoid(p[0])?,
            };
            weighted(g, y, i as u64)
        });
        assert!(err < 1e-6, "{op}: {err}");
    }
}

#[test]
fn gradients_of_conv_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = vec![random(&[2, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
    let err = check(params, |g, p| {
        let y = g.conv2d(p[0], p[1], 2, 1)?;
        weighted(g, y, 1)
    });
    assert!(err < 1e-6, "conv: {err}");

    let params = vec![random(&[4, 3], &mut rng), random(&[5, 3], &mut rng), random(&[5], &mut rng)];
    let err = check(params, |g, p| {
        let y = g.linear(p[0], p[1], Some(p[2]))?;
        weighted(g, y, 2)
    });
    assert!(err < 1e-6, "linear: {err}");
}

#[test]
fn gradients_of_batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = vec![random(&[3, 2, 2, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    let err = check(params.clone(), |g, p| {
        let mut stats = RunningStats::new(2);
        let y = g.batch_norm(p[0], p[1], p[2], NormMode::Train(&mut stats))?;
        weighted(g, y, 3)
    });
    assert!(err < 1e-6, "bn train: {err}");
    let stats = RunningStats {
        mean: vec![0.2, -0.1],
        var: vec![0.7, 1.3],
    };
    let err = check(params, |g, p| {
        let y = g.batch_norm(p[0], p[1], p[2], NormMode::Eval(&stats))?;
        weighted(g, y, 4)
    });
    assert!(err < 1e-6, "bn eval: {err}");
}

#[test]
fn gradients_of_channel_scale_pooling_and_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = vec![random(&[2, 3, 4, 4], &mut rng), random(&[3], &mut rng)];
    let err = check(params.clone(), |g, p| {
        let y = g.channel_scale(p[0], p[1])?;
        weighted(g, y, 5)
    });
    assert!(err < 1e-6, "channel_scale: {err}");

    let err = check(vec![params[0].clone()], |g, p| {
        let y = g.maxpool(p[0], 3, 2, 1)?;
        weighted(g, y, 6)
    });
    assert!(err < 1e-6, "maxpool: {err}");

    let err = check(vec![params[0].clone()], |g, p| {
        let y = g.global_avgpool(p[0])?;
        weighted(g, y, 7)
    });
    assert!(err < 1e-6, "avgpool: {err}");

    let params = vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)];
    let err = check(params, |g, p| {
        let y = g.mul(p[0], p[1])?;
        let z = g.add(y, p[0])?;
        weighted(g, z, 8)
    });
    assert!(err < 1e-6, "mul/add: {err}");
}

#[test]
fn gradient_of_channel_scale_is_per_channel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let a = random(&[3], &mut rng);
    let up = random(&[2, 3, 2, 2], &mut rng);
    let mut g = Graph::new();
    let (xv, av, uv) = (g.constant(x.clone()), g.param(a), g.constant(up.clone()));
    let y = g.channel_scale(xv, av).unwrap();
    let p = g.mul(y, uv).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    for c in 0..3 {
        let want: f64 = (0..2)
            .flat_map(|n| (0..4).map(move |k| (n * 3 + c) * 4 + k))
            .map(|i| x.data()[i] * up.data()[i])
            .sum();
        assert!((g.grad(av).unwrap().data()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn gradient_of_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let err = check(vec![random(&[4, 6], &mut rng).map(|v| 3.0 * v)], |g, p| {
        g.softmax_cross_entropy(p[0], &[0, 5, 2, 2])
    });
    assert!(err < 1e-6, "softmax ce: {err}");
}

#[test]
fn composite_conv_relu_fc_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = vec![
        random(&[2, 2, 6, 6], &mut rng),
        random(&[4, 2, 3, 3], &mut rng),
        random(&[3, 4], &mut rng),
        random(&[3], &mut rng),
    ];
    let mut obj = GraphObjective::new(|g: &mut Graph<f64>, p: &[Var]| {
        let y = g.conv2d(p[0], p[1], 1, 1)?;
        let y = g.relu(y)?;
        let y = g.global_avgpool(y)?;
        let z = g.linear(y, p[2], Some(p[3]))?;
        g.softmax_cross_entropy(z, &[1, 2])
    });
    let report = finite_diff_check(&mut obj, &params, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}
