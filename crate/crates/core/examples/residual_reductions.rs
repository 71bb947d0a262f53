//! Cross-residual blocks collapse to plain residual blocks in the limiting
//! cases: one task, or all cross entries zero. A learned scale, shown for
//! contrast, mixes in the other task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xres::blocks::{
    cross_residual_block, residual_block, ConvStack, CrossResidualBlockParams, CrossWeight, NormParams, Pass,
    PostActivation, ResidualBlockParams, Shortcut,
};
use xres::tensor::RunningStats;
use xres::{Graph, Tensor};

fn main() -> xres::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.random_range(-0.5..0.5));
    let mut g = Graph::new();
    let mut stats = Vec::new();
    let mut norm = |g: &mut Graph<f64>, c: usize| {
        stats.push(RunningStats::new(c));
        NormParams {
            gamma: g.param(Tensor::ones([c])),
            beta: g.param(Tensor::zeros([c])),
            stats: stats.len() - 1,
        }
    };

    let tasks = 2;
    let xs: Vec<_> = (0..tasks).map(|_| g.constant(rand(&[2, 8, 4, 4]))).collect();
    let mut paths = Vec::new();
    for _ in 0..tasks {
        let w = [g.param(rand(&[4, 8, 1, 1])), g.param(rand(&[4, 4, 3, 3])), g.param(rand(&[8, 4, 1, 1]))];
        let norms = [norm(&mut g, 4), norm(&mut g, 4)];
        let last = norm(&mut g, 8);
        paths.push(ConvStack::bottleneck(w, norms, Some(last), 1));
    }
    let a = g.param(rand(&[8]));

    for (label, other) in [("zero", CrossWeight::Zero), ("contrast: a learned scale", CrossWeight::ChannelScale(a))] {
        let cross = CrossResidualBlockParams {
            paths: paths.clone(),
            posts: vec![PostActivation::Relu; tasks],
            weights: vec![vec![CrossWeight::Identity, other.clone()], vec![other.clone(), CrossWeight::Identity]],
        };
        let ys = cross_residual_block(&mut Pass::new(&mut g, &mut stats, true), &xs, &cross)?;
        for t in 0..tasks {
            let single = ResidualBlockParams {
                path: paths[t].clone(),
                shortcut: Shortcut::Identity,
                post: PostActivation::Relu,
            };
            let y = residual_block(&mut Pass::new(&mut g, &mut stats, true), xs[t], &single)?;
            println!("{label:<25} cross entries, task {t}: max |cross - residual| = {:.3e}", g.value(ys[t]).max_abs_diff(g.value(y)));
        }
    }
    Ok(())
}
