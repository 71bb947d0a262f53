//! Saves a network, reloads it and confirms the outputs match bit for bit.

use xres::arch::{build_mini, he_init, ArchSpec, Variant};
use xres::{checkpoint, Graph, Tensor};

fn main() -> xres::Result<()> {
    let spec = ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24));
    let mut net = build_mini::<f32>(&spec, Variant::Xs)?;
    he_init(&mut net, 3);
    let images = Tensor::<f32>::from_fn([2, 3, 32, 32], |i| (i % 17) as f32 / 17.0);
    net.forward(&mut Graph::new(), images.clone(), true)?;

    let path = std::env::temp_dir().join("xres_example.ckpt");
    checkpoint::save(&net, 3, &path)?;
    let (mut back, seed) = checkpoint::load::<f32>(&path)?;
    let logits = |n: &mut xres::arch::Network<f32>| -> xres::Result<Vec<Tensor<f32>>> {
        let mut g = Graph::new();
        let f = n.forward(&mut g, images.clone(), false)?;
        Ok(f.logits.iter().map(|&v| g.value(v).clone()).collect())
    };
    let same = logits(&mut net)? == logits(&mut back)?;
    println!("seed {seed}, {} bytes, eval logits identical: {same}", std::fs::metadata(&path)?.len());
    std::fs::remove_file(&path)?;
    Ok(())
}
