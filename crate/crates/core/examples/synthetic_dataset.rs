//! Renders the colour-by-shape dataset and writes one sample per pair as a
//! PPM contact sheet.

use std::io::Write;

use xres::data::{generate, split, TaskFamilySpec};

fn main() -> xres::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pairs.ppm".into());
    let ds = generate(&TaskFamilySpec {
        images_per_pair: 10,
        ..Default::default()
    })?;
    let sp = split(&ds, 0)?;
    println!("{} samples, {} train / {} test", ds.len(), sp.train.len(), sp.test.len());
    for (p, &(a, n)) in ds.pairs.iter().enumerate() {
        println!("pair {p:>2}: {} {}", ds.adjectives[a as usize], ds.nouns[n as usize]);
    }

    // 6 columns, one row per 6 pairs
    let s = ds.image_size;
    let (cols, rows) = (6, ds.pairs.len().div_ceil(6));
    let mut sheet = vec![0u8; cols * rows * s * s * 3];
    for p in 0..ds.pairs.len() {
        let i = ds.labels.iter().position(|l| l.pair as usize == p).expect("pair present");
        let img = ds.image_bytes(i);
        let (ox, oy) = ((p % cols) * s, (p / cols) * s);
        for y in 0..s {
            let dst = ((oy + y) * cols * s + ox) * 3;
            sheet[dst..dst + s * 3].copy_from_slice(&img[y * s * 3..(y + 1) * s * 3]);
        }
    }
    let mut f = std::fs::File::create(&out)?;
    write!(f, "P6\n{} {}\n255\n", cols * s, rows * s)?;
    f.write_all(&sheet)?;
    println!("wrote {out}");
    Ok(())
}
