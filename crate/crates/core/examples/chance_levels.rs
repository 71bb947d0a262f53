//! Top-1 and top-5 of uniform random scores, the floor any trained head
//! must clear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xres::train::topk_accuracy;
use xres::Tensor;

fn main() -> xres::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 20_000;
    for k in [8, 24, 117, 167, 553] {
        let scores = Tensor::<f32>::from_fn([n, k], |_| rng.random());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (t1, t5) = (topk_accuracy(&scores, &labels, 1)?, topk_accuracy(&scores, &labels, 5.min(k))?);
        println!("K={k:>3}: top-1 {t1:>6.2}% (1/K {:>6.2}%), top-5 {t5:>6.2}%", 100.0 / k as f64);
    }
    Ok(())
}
