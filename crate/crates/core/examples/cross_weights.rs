//! Trains the learned-scale variant briefly and prints the sign balance of
//! its cross weights, then writes the sorted CSV.

use xres::arch::{build_mini, he_init, ArchSpec, Variant};
use xres::data::{generate, split, TaskFamilySpec};
use xres::train::{dump_cross_weights, train, EvalConfig, Outputs, TrainConfig};

fn main() -> xres::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "cross_weights.csv".into());
    let ds = generate(&TaskFamilySpec {
        images_per_pair: 30,
        ..Default::default()
    })?;
    let sp = split(&ds, 0)?;
    let mut net = build_mini::<f32>(&ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24)), Variant::Xs)?;
    he_init(&mut net, 2);
    let before = dump_cross_weights(&net).nonnegative_fraction();
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 3,
        seed: 2,
        ..Default::default()
    };
    train(&mut net, &ds, &sp.train, &sp.test, &cfg, &EvalConfig::default(), &Outputs::default())?;
    let dump = dump_cross_weights(&net);
    println!("non-negative cross weights: {:.1}% at init, {:.1}% after training", 100.0 * before, 100.0 * dump.nonnegative_fraction());
    std::fs::write(&out, dump.to_csv(2))?;
    println!("wrote {} rows to {out}", dump.rows.len());
    Ok(())
}
