//! Central finite differences against the tape gradients of the mini
//! learned-scale network, in both batch-norm modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xres::arch::{build_mini, he_init, ArchSpec, Variant};
use xres::tensor::GradCheckOptions;
use xres::train::gradcheck_network;
use xres::Tensor;

fn main() -> xres::Result<()> {
    let spec = ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24));
    let mut net = build_mini::<f64>(&spec, Variant::Xs)?;
    he_init(&mut net, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::from_fn([2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let labels: Vec<Vec<usize>> = spec.heads.iter().map(|h| (0..2).map(|_| rng.random_range(0..h.classes)).collect()).collect();
    let opts = GradCheckOptions {
        max_entries_per_tensor: Some(3),
        ..Default::default()
    };
    let check = gradcheck_network(&net, &images, &labels, &opts)?;
    println!(
        "{} tensors, {} entries ({} with a refined step), max relative error {:.2e}",
        net.params().len(),
        check.entries_checked(),
        check.entries_refined(),
        check.max_rel_error()
    );
    if let Some((name, e)) = check.worst() {
        println!("worst tensor {name}: {e:.2e}");
    }
    for name in check.structural_zeros() {
        println!("{name}: gradient is exactly zero with batch statistics");
    }
    Ok(())
}
