//! Parameter accounting of the ResNet-50 baselines and their multitask forms.

use xres::arch::{build_multitask, build_single_task, count_params, ArchSpec, Network, Variant};

fn main() -> xres::Result<()> {
    let heads = [("adjective", 117), ("pair", 553), ("noun", 167)];
    let mut singles = 0;
    for (name, classes) in heads {
        let n = count_params(&build_single_task::<f32>(&ArchSpec::resnet50(&[(name, classes)]))?);
        singles += n;
        println!("single-task {name:<9} ({classes:>3} classes) {:>6.2}M", n as f64 / 1e6);
    }
    println!("three single-task nets      {:>6.2}M", singles as f64 / 1e6);

    let spec = ArchSpec::resnet50_multitask(&heads);
    for variant in Variant::ALL {
        let n = count_params(&build_multitask::<f32>(&spec, variant)?);
        println!("multitask {variant:<3}               {:>6.2}M ({:.1}% of the singles)", n as f64 / 1e6, 100.0 * n as f64 / singles as f64);
    }

    println!("\nbreakdown of the learned-scale variant:");
    let net = Network::<f32>::build(&spec, Variant::Xs)?;
    for (group, n) in net.params().breakdown() {
        println!("  {group:<10} {n:>10}");
    }
    Ok(())
}
