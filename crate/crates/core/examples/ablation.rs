//! Zero, identity and learned-scale cross connections trained on the same
//! data and seeds. Arguments: images per pair, epochs, seeds.

use xres::arch::{build_mini, he_init, ArchSpec, Variant};
use xres::data::{generate, split, TaskFamilySpec};
use xres::train::{train, EvalConfig, Outputs, TrainConfig};

fn main() -> xres::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let arg = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let (per_pair, epochs, seeds) = (arg(0, 40), arg(1, 2), arg(2, 1));
    let ds = generate(&TaskFamilySpec {
        images_per_pair: per_pair,
        seed: 7,
        ..Default::default()
    })?;
    let sp = split(&ds, 0)?;
    let spec = ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24));
    let pair = spec.heads.iter().position(|h| h.name == "pair").expect("pair head");
    for variant in Variant::ALL {
        let mut scores = Vec::new();
        for seed in 1..=seeds as u64 {
            let mut net = build_mini::<f32>(&spec, variant)?;
            he_init(&mut net, seed);
            let cfg = TrainConfig {
                lr: 0.01,
                epochs,
                seed,
                ..Default::default()
            };
            let report = train(&mut net, &ds, &sp.train, &sp.test, &cfg, &EvalConfig::default(), &Outputs::default())?;
            scores.push(report.records.last().expect("final eval").top1[pair]);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("{variant:<3} pair top-1 {mean:>6.2} over {seeds} seed(s)");
    }
    Ok(())
}
