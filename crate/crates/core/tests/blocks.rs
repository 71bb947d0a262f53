use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xres::blocks::{
    cross_residual_block, highway_layer, lstm_ff_cell, residual_block, Affine, ConvStack, CrossResidualBlockParams,
    CrossWeight, Gate, GateMode, GateWeights, HighwayParams, LstmCellParams, NormParams, Pass, PostActivation,
    Projection, ResidualBlockParams, Shortcut,
};
use xres::tensor::{finite_diff_check, GradCheckOptions, GraphObjective, Pointwise, RunningStats};
use xres::{Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Allocates block parameters on a tape and keeps the running-stat slots.
struct Setup {
    g: Graph<f64>,
    stats: Vec<RunningStats<f64>>,
    rng: ChaCha8Rng,
}

impl Setup {
    fn new(seed: u64) -> Self {
        Setup {
            g: Graph::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn rand(&mut self, shape: &[usize], scale: f64) -> Var {
        let t = random(shape, &mut self.rng, scale);
        self.g.param(t)
    }

    fn zeros(&mut self, shape: &[usize]) -> Var {
        self.g.param(Tensor::zeros(shape.to_vec()))
    }

    fn norm(&mut self, c: usize, random_affine: bool) -> NormParams {
        let (gamma, beta) = if random_affine {
            let g = random(&[c], &mut self.rng, 1.0).map(|v| 1.0 + 0.5 * v);
            (self.g.param(g), self.rand(&[c], 0.5))
        } else {
            (self.g.param(Tensor::ones([c])), self.zeros(&[c]))
        };
        self.stats.push(RunningStats::new(c));
        NormParams {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    /// Bottleneck `cin → mid → cout`; zero weights when `scale == 0`.
    fn bottleneck(&mut self, cin: usize, mid: usize, cout: usize, stride: usize, scale: f64) -> ConvStack {
        let w = |s: &mut Self, shape: &[usize]| if scale == 0.0 { s.zeros(shape) } else { s.rand(shape, scale) };
        let w1 = w(self, &[mid, cin, 1, 1]);
        let w2 = w(self, &[mid, mid, 3, 3]);
        let w3 = w(self, &[cout, mid, 1, 1]);
        let random_affine = scale != 0.0;
        let n1 = self.norm(mid, random_affine);
        let n2 = self.norm(mid, random_affine);
        let n3 = self.norm(cout, random_affine);
        ConvStack::bottleneck([w1, w2, w3], [n1, n2], Some(n3), stride)
    }

    fn pass(&mut self) -> Pass<'_, f64> {
        Pass::new(&mut self.g, &mut self.stats, true)
    }
}

#[test]
fn zero_residual_path_passes_nonnegative_input() {
    let mut s = Setup::new(1);
    let x = s.g.constant(random(&[2, 4, 3, 3], &mut s.rng, 1.0).map(f64::abs));
    let p = ResidualBlockParams {
        path: s.bottleneck(4, 2, 4, 1, 0.0),
        shortcut: Shortcut::Identity,
        post: PostActivation::Relu,
    };
    let y = residual_block(&mut s.pass(), x, &p).unwrap();
    assert_eq!(s.g.value(y), s.g.value(x));
}

#[test]
fn zero_projection_and_zero_path_give_zero() {
    let mut s = Setup::new(2);
    let x = s.g.constant(random(&[2, 4, 4, 4], &mut s.rng, 1.0));
    let path = s.bottleneck(4, 2, 8, 2, 0.0);
    let proj = Projection {
        weight: s.zeros(&[8, 4, 1, 1]),
        stride: 2,
        norm: Some(s.norm(8, false)),
    };
    let p = ResidualBlockParams {
        path,
        shortcut: Shortcut::Projection(proj),
        post: PostActivation::Relu,
    };
    let y = residual_block(&mut s.pass(), x, &p).unwrap();
    assert_eq!(s.g.value(y).shape(), &[2, 8, 2, 2]);
    assert!(s.g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_shortcut_with_shape_change_is_rejected() {
    let mut s = Setup::new(3);
    let x = s.g.constant(random(&[2, 4, 4, 4], &mut s.rng, 1.0));
    let p = ResidualBlockParams {
        path: s.bottleneck(4, 2, 8, 1, 0.3),
        shortcut: Shortcut::Identity,
        post: PostActivation::Relu,
    };
    let err = residual_block(&mut s.pass(), x, &p).unwrap_err().to_string();
    assert!(err.contains("identity shortcut"), "{err}");
}

#[test]
fn residual_block_equals_explicit_composition() {
    let mut s = Setup::new(4);
    let x = s.g.constant(random(&[2, 4, 4, 4], &mut s.rng, 1.0));
    let path = s.bottleneck(4, 3, 6, 2, 0.4);
    let proj = Projection {
        weight: s.rand(&[6, 4, 1, 1], 0.4),
        stride: 2,
        norm: Some(s.norm(6, true)),
    };
    let p = ResidualBlockParams {
        path: path.clone(),
        shortcut: Shortcut::Projection(proj.clone()),
        post: PostActivation::Relu,
    };
    let y = residual_block(&mut s.pass(), x, &p).unwrap();

    // the same network spelled out op by op
    let mut stats = s.stats.clone();
    let g = &mut s.g;
    let mut h = x;
    for unit in &path.units {
        h = g.conv2d(h, unit.weight, unit.stride, unit.pad).unwrap();
        if let Some(n) = unit.norm {
            h = g
                .batch_norm(h, n.gamma, n.beta, xres::tensor::NormMode::Train(&mut stats[n.stats]))
                .unwrap();
        }
        if unit.act.is_some() {
            h = g.relu(h).unwrap();
        }
    }
    let pn = proj.norm.unwrap();
    let sc = g.conv2d(x, proj.weight, 2, 0).unwrap();
    let sc = g
        .batch_norm(sc, pn.gamma, pn.beta, xres::tensor::NormMode::Train(&mut stats[pn.stats]))
        .unwrap();
    let sum = g.add(h, sc).unwrap();
    let want = g.relu(sum).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(want)) <= 1e-12);
}

fn cross_params(paths: Vec<ConvStack>, post: PostActivation, weights: Vec<Vec<CrossWeight>>) -> CrossResidualBlockParams {
    let n = paths.len();
    CrossResidualBlockParams {
        paths,
        posts: vec![post; n],
        weights,
    }
}

#[test]
fn single_task_cross_residual_is_residual() {
    for post in [PostActivation::None, PostActivation::Relu] {
        let mut s = Setup::new(5);
        let x = s.g.constant(random(&[2, 4, 3, 3], &mut s.rng, 1.0));
        let path = s.bottleneck(4, 2, 4, 1, 0.5);
        let res = ResidualBlockParams {
            path: path.clone(),
            shortcut: Shortcut::Identity,
            post: post.clone(),
        };
        let cross = cross_params(vec![path.clone()], post.clone(), vec![vec![CrossWeight::Identity]]);
        let r = residual_block(&mut s.pass(), x, &res).unwrap();
        let c = cross_residual_block(&mut s.pass(), &[x], &cross).unwrap();
        assert_eq!(s.g.value(r), s.g.value(c[0]));
        if post == PostActivation::None {
            let hw = HighwayParams {
                transform: path,
                transform_gate: Gate::On,
                carry_gate: Gate::On,
            };
            let h = highway_layer(&mut s.pass(), x, &hw).unwrap();
            assert_eq!(s.g.value(r), s.g.value(h));
        }
    }
}

#[test]
fn zero_cross_entries_give_independent_blocks() {
    let mut s = Setup::new(6);
    let xs: Vec<Var> = (0..3).map(|_| {
        let t = random(&[2, 4, 3, 3], &mut s.rng, 1.0);
        s.g.constant(t)
    }).collect();
    let paths: Vec<ConvStack> = (0..3).map(|_| s.bottleneck(4, 2, 4, 1, 0.5)).collect();
    let post_norms: Vec<NormParams> = (0..3).map(|_| s.norm(4, true)).collect();
    let weights = (0..3)
        .map(|t| (0..3).map(|j| if j == t { CrossWeight::Identity } else { CrossWeight::Zero }).collect())
        .collect();
    let cross = CrossResidualBlockParams {
        paths: paths.clone(),
        posts: post_norms.iter().map(|&n| PostActivation::NormRelu(n)).collect(),
        weights,
    };
    let ys = cross_residual_block(&mut s.pass(), &xs, &cross).unwrap();
    for t in 0..3 {
        let single = ResidualBlockParams {
            path: paths[t].clone(),
            shortcut: Shortcut::Identity,
            post: PostActivation::NormRelu(post_norms[t]),
        };
        let y = residual_block(&mut s.pass(), xs[t], &single).unwrap();
        assert!(s.g.value(y).max_abs_diff(s.g.value(ys[t])) <= 1e-12);
    }
}

#[test]
fn half_scaled_cross_entry_adds_half_the_other_input() {
    let mut s = Setup::new(7);
    let x = s.g.constant(random(&[2, 4, 3, 3], &mut s.rng, 1.0));
    let paths: Vec<ConvStack> = (0..2).map(|_| s.bottleneck(4, 2, 4, 1, 0.5)).collect();
    let halves: Vec<Var> = (0..2).map(|_| s.g.param(Tensor::full([4], 0.5))).collect();
    let weights = vec![
        vec![CrossWeight::Identity, CrossWeight::ChannelScale(halves[0])],
        vec![CrossWeight::ChannelScale(halves[1]), CrossWeight::Identity],
    ];
    let cross = cross_params(paths.clone(), PostActivation::None, weights);
    let ys = cross_residual_block(&mut s.pass(), &[x, x], &cross).unwrap();
    for t in 0..2 {
        let fx = {
            let mut pass = s.pass();
            xres::blocks::Mapping::apply(&paths[t], &mut pass, x).unwrap()
        };
        let (f, xv) = (s.g.value(fx), s.g.value(x));
        let want = Tensor::from_fn(f.shape().to_vec(), |i| f.data()[i] + xv.data()[i] + 0.5 * xv.data()[i]);
        assert!(s.g.value(ys[t]).max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn identity_cross_across_channel_change_is_rejected() {
    let mut s = Setup::new(8);
    let xs: Vec<Var> = (0..2).map(|_| {
        let t = random(&[2, 4, 3, 3], &mut s.rng, 1.0);
        s.g.constant(t)
    }).collect();
    let paths: Vec<ConvStack> = (0..2).map(|_| s.bottleneck(4, 2, 8, 1, 0.5)).collect();
    let proj = |s: &mut Setup| {
        CrossWeight::Projection(Projection {
            weight: s.rand(&[8, 4, 1, 1], 0.5),
            stride: 1,
            norm: None,
        })
    };
    let weights = vec![vec![proj(&mut s), CrossWeight::Identity], vec![CrossWeight::Identity, proj(&mut s)]];
    let cross = cross_params(paths, PostActivation::Relu, weights);
    let err = cross_residual_block(&mut s.pass(), &xs, &cross).unwrap_err().to_string();
    assert!(err.contains("cross weight"), "{err}");
}

#[test]
fn shrinking_scales_approach_the_zero_cross_output() {
    let mut s = Setup::new(9);
    let xs: Vec<Var> = (0..3).map(|_| {
        let t = random(&[2, 4, 3, 3], &mut s.rng, 1.0);
        s.g.constant(t)
    }).collect();
    let paths: Vec<ConvStack> = (0..3).map(|_| s.bottleneck(4, 2, 4, 1, 0.5)).collect();
    let base: Vec<Tensor<f64>> = (0..6).map(|_| random(&[4], &mut s.rng, 1.0)).collect();
    let norm_x: f64 = xs.iter().map(|&x| s.g.value(x).l2_norm()).sum();

    let run = |s: &mut Setup, factor: f64| -> Vec<Tensor<f64>> {
        let mut k = 0;
        let mut weights = Vec::new();
        for t in 0..3 {
            let mut row = Vec::new();
            for j in 0..3 {
                if j == t {
                    row.push(CrossWeight::Identity);
                } else {
                    let a = s.g.param(base[k].map(|v| v * factor));
                    k += 1;
                    row.push(CrossWeight::ChannelScale(a));
                }
            }
            weights.push(row);
        }
        let cross = CrossResidualBlockParams {
            paths: paths.clone(),
            posts: vec![PostActivation::Relu; 3],
            weights,
        };
        let ys = cross_residual_block(&mut s.pass(), &xs, &cross).unwrap();
        ys.iter().map(|&y| s.g.value(y).clone()).collect()
    };
    let zero = run(&mut s, 0.0);
    let a_inf = base.iter().flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut previous = f64::INFINITY;
    for factor in [1.0, 0.5, 0.25, 0.1, 0.01, 0.001] {
        let ys = run(&mut s, factor);
        let dist: f64 = ys
            .iter()
            .zip(&zero)
            .map(|(y, z)| Tensor::from_fn(y.shape().to_vec(), |i| y.data()[i] - z.data()[i]).l2_norm())
            .sum();
        // each target receives two scaled inputs
        assert!(dist <= 2.0 * factor * a_inf * norm_x + 1e-12, "factor {factor}: {dist}");
        assert!(dist <= previous);
        previous = dist;
    }
}

#[test]
fn cross_block_gradients_match_finite_differences() {
    // parameters: 3 task inputs, 3 paths (w1,w2,w3), 6 scale vectors
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = Vec::new();
    for _ in 0..3 {
        params.push(random(&[3, 4, 3, 3], &mut rng, 1.0));
    }
    for _ in 0..3 {
        params.push(random(&[2, 4, 1, 1], &mut rng, 0.7));
        params.push(random(&[2, 2, 3, 3], &mut rng, 0.7));
        params.push(random(&[4, 2, 1, 1], &mut rng, 0.7));
    }
    for _ in 0..6 {
        params.push(random(&[4], &mut rng, 1.0));
    }
    let head = random(&[5, 4], &mut rng, 1.0);
    let mut obj = GraphObjective::new(|g: &mut Graph<f64>, p: &[Var]| {
        let mut stats: Vec<RunningStats<f64>> = (0..12).map(|_| RunningStats::new(4)).collect();
        let mut norms = Vec::new();
        for (k, c) in [2, 2, 4].iter().cycle().take(9).enumerate() {
            stats[k] = RunningStats::new(*c);
            norms.push(NormParams {
                gamma: g.constant(Tensor::ones([*c])),
                beta: g.constant(Tensor::zeros([*c])),
                stats: k,
            });
        }
        let post: Vec<NormParams> = (9..12)
            .map(|k| NormParams {
                gamma: g.constant(Tensor::ones([4])),
                beta: g.constant(Tensor::zeros([4])),
                stats: k,
            })
            .collect();
        let paths = (0..3)
            .map(|t| ConvStack::bottleneck([p[3 + 3 * t], p[4 + 3 * t], p[5 + 3 * t]], [norms[3 * t], norms[3 * t + 1]], Some(norms[3 * t + 2]), 1))
            .collect();
        let mut k = 12;
        let mut weights = Vec::new();
        for t in 0..3 {
            let mut row = Vec::new();
            for j in 0..3 {
                if j == t {
                    row.push(CrossWeight::Identity);
                } else {
                    row.push(CrossWeight::ChannelScale(p[k]));
                    k += 1;
                }
            }
            weights.push(row);
        }
        let cross = CrossResidualBlockParams {
            paths,
            posts: post.into_iter().map(PostActivation::NormRelu).collect(),
            weights,
        };
        let mut pass = Pass::new(g, &mut stats, true);
        let ys = cross_residual_block(&mut pass, &p[0..3], &cross)?;
        let w = g.constant(head.clone());
        let mut loss = None;
        for (t, y) in ys.into_iter().enumerate() {
            let f = g.global_avgpool(y)?;
            let z = g.linear(f, w, None)?;
            let l = g.softmax_cross_entropy(z, &[t, t + 1, 4])?;
            loss = Some(match loss {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        Ok(loss.unwrap())
    });
    let report = finite_diff_check(&mut obj, &params, &GradCheckOptions::default()).unwrap();
    let scales = &report.tensors[12..];
    assert!(scales.iter().all(|t| t.rel_error < 1e-6), "{scales:?}");
    assert!(scales.iter().all(|t| t.analytic_norm > 1e-4));
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
}

#[test]
fn channel_scale_entry_owns_exactly_c_parameters() {
    let mut s = Setup::new(11);
    let a = s.rand(&[2048], 1.0);
    assert_eq!(s.g.value(a).numel(), 2048);
}

fn affine(s: &mut Setup, d: usize, act: Option<Pointwise>, scale: f64) -> Affine {
    Affine {
        weight: if scale == 0.0 { s.zeros(&[d, d]) } else { s.rand(&[d, d], scale) },
        bias: Some(if scale == 0.0 { s.zeros(&[d]) } else { s.rand(&[d], scale) }),
        act,
    }
}

#[test]
fn highway_pure_carry_is_identity() {
    let mut s = Setup::new(12);
    let x = s.g.constant(random(&[3, 5], &mut s.rng, 1.0));
    let p = HighwayParams {
        transform: affine(&mut s, 5, Some(Pointwise::Tanh), 0.5),
        transform_gate: Gate::Off,
        carry_gate: Gate::On,
    };
    let y = highway_layer(&mut s.pass(), x, &p).unwrap();
    assert_eq!(s.g.value(y), s.g.value(x));
}

#[test]
fn highway_gates_on_equals_residual_layer() {
    let mut s = Setup::new(13);
    let x = s.g.constant(random(&[3, 5], &mut s.rng, 1.0));
    let h = affine(&mut s, 5, Some(Pointwise::Tanh), 0.5);
    let hw = HighwayParams {
        transform: h.clone(),
        transform_gate: Gate::On,
        carry_gate: Gate::On,
    };
    let res = ResidualBlockParams {
        path: h,
        shortcut: Shortcut::Identity,
        post: PostActivation::None,
    };
    let a = highway_layer(&mut s.pass(), x, &hw).unwrap();
    let b = residual_block(&mut s.pass(), x, &res).unwrap();
    assert_eq!(s.g.value(a), s.g.value(b));
}

#[test]
fn highway_learned_gates_match_formula() {
    let mut s = Setup::new(14);
    let xt = random(&[3, 4], &mut s.rng, 1.0);
    let x = s.g.constant(xt.clone());
    let ws: Vec<Tensor<f64>> = (0..6)
        .map(|i| random(if i % 2 == 0 { &[4, 4] } else { &[4] }, &mut s.rng, 0.8))
        .collect();
    let v: Vec<Var> = ws.iter().map(|t| s.g.param(t.clone())).collect();
    let p = HighwayParams {
        transform: Affine {
            weight: v[0],
            bias: Some(v[1]),
            act: Some(Pointwise::Tanh),
        },
        transform_gate: Gate::Learned { weight: v[2], bias: v[3] },
        carry_gate: Gate::Learned { weight: v[4], bias: v[5] },
    };
    let y = highway_layer(&mut s.pass(), x, &p).unwrap();
    let aff = |w: &Tensor<f64>, b: &Tensor<f64>, n: usize, k: usize| -> f64 {
        (0..4).map(|d| w.data()[k * 4 + d] * xt.data()[n * 4 + d]).sum::<f64>() + b.data()[k]
    };
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for n in 0..3 {
        for k in 0..4 {
            let h = aff(&ws[0], &ws[1], n, k).tanh();
            let t = sig(aff(&ws[2], &ws[3], n, k));
            let c = sig(aff(&ws[4], &ws[5], n, k));
            let want = h * t + xt.data()[n * 4 + k] * c;
            assert!((s.g.value(y).data()[n * 4 + k] - want).abs() <= 1e-12);
        }
    }
}

fn lstm_params(s: &mut Setup, d: usize, cell_scale: f64, gate_scale: f64) -> LstmCellParams {
    let gw = |s: &mut Setup, scale: f64| GateWeights {
        weight: if scale == 0.0 { s.zeros(&[d, d]) } else { s.rand(&[d, d], scale) },
        bias: if scale == 0.0 { s.zeros(&[d]) } else { s.rand(&[d], scale) },
    };
    LstmCellParams {
        input: gw(s, gate_scale),
        forget: gw(s, gate_scale),
        cell: gw(s, cell_scale),
        output: gw(s, gate_scale),
        recurrent: None,
    }
}

#[test]
fn ungated_cell_with_zero_weights_carries_input() {
    let mut s = Setup::new(15);
    let x = s.g.constant(random(&[2, 6], &mut s.rng, 1.0));
    let p = lstm_params(&mut s, 6, 0.0, 0.0);
    let (c, h) = lstm_ff_cell(&mut s.pass(), x, x, None, &p, GateMode::ForcedOn).unwrap();
    assert_eq!(s.g.value(c), s.g.value(x));
    assert_eq!(*s.g.value(h), s.g.value(x).map(f64::tanh));
}

#[test]
fn ungated_cell_state_is_residual_preactivation() {
    let mut s = Setup::new(16);
    let x = s.g.constant(random(&[2, 6], &mut s.rng, 1.0));
    let p = lstm_params(&mut s, 6, 0.6, 0.6);
    let (c, _) = lstm_ff_cell(&mut s.pass(), x, x, None, &p, GateMode::ForcedOn).unwrap();
    let res = ResidualBlockParams {
        path: Affine {
            weight: p.cell.weight,
            bias: Some(p.cell.bias),
            act: Some(Pointwise::Tanh),
        },
        shortcut: Shortcut::Identity,
        post: PostActivation::None,
    };
    let r = residual_block(&mut s.pass(), x, &res).unwrap();
    assert_eq!(s.g.value(c), s.g.value(r));
}

#[test]
fn half_open_learned_gates() {
    let mut s = Setup::new(17);
    let xt = random(&[2, 3], &mut s.rng, 1.0);
    let ct = random(&[2, 3], &mut s.rng, 1.0);
    let x = s.g.constant(xt.clone());
    let c_prev = s.g.constant(ct.clone());
    let p = lstm_params(&mut s, 3, 0.7, 0.0);
    let (wc, bc) = (s.g.value(p.cell.weight).clone(), s.g.value(p.cell.bias).clone());
    let (c, h) = lstm_ff_cell(&mut s.pass(), x, c_prev, None, &p, GateMode::Learned).unwrap();
    for n in 0..2 {
        for k in 0..3 {
            let z: f64 = (0..3).map(|d| wc.data()[k * 3 + d] * xt.data()[n * 3 + d]).sum::<f64>() + bc.data()[k];
            let want_c = 0.5 * ct.data()[n * 3 + k] + 0.5 * z.tanh();
            let got_c = s.g.value(c).data()[n * 3 + k];
            assert!((got_c - want_c).abs() <= 1e-12);
            assert!((s.g.value(h).data()[n * 3 + k] - 0.5 * want_c.tanh()).abs() <= 1e-12);
        }
    }
}

#[test]
fn learned_gates_stay_in_unit_interval() {
    let mut s = Setup::new(18);
    let x = s.g.constant(random(&[4, 5], &mut s.rng, 3.0));
    let w = s.rand(&[5, 5], 3.0);
    let b = s.rand(&[5], 3.0);
    let z = s.g.linear(x, w, Some(b)).unwrap();
    let gate = s.g.sigmoid(z).unwrap();
    assert!(s.g.value(gate).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}
