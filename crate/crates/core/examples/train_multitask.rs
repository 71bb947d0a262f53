//! A short three-task training run on the mini network, printing each
//! evaluation row.

use xres::arch::{build_mini, he_init, ArchSpec, Variant};
use xres::data::{generate, split, TaskFamilySpec};
use xres::train::{train, EvalConfig, MetricsRecord, Outputs, TrainConfig};

fn main() -> xres::Result<()> {
    let ds = generate(&TaskFamilySpec {
        images_per_pair: 40,
        ..Default::default()
    })?;
    let sp = split(&ds, 0)?;
    let spec = ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24));
    let mut net = build_mini::<f32>(&spec, Variant::Xs)?;
    he_init(&mut net, 1);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 4,
        seed: 1,
        ..Default::default()
    };
    let tasks: Vec<String> = spec.heads.iter().map(|h| h.name.clone()).collect();
    println!("{}", MetricsRecord::csv_header(&tasks));
    let report = train(&mut net, &ds, &sp.train, &sp.test, &cfg, &EvalConfig::default(), &Outputs::default())?;
    for r in &report.records {
        println!("{}", r.csv_row());
    }
    println!("{} steps, best eval loss at step {}", report.steps, report.best_step);
    Ok(())
}
