use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xres::data::{
    default_pairs, flip_horizontal, generate, random_flip, split, Dataset, Labels, MultitaskSample, TaskFamilySpec,
    MIN_NOUNS_PER_ADJECTIVE,
};
use xres::{Error, Tensor};

fn small(images_per_pair: usize, seed: u64) -> TaskFamilySpec {
    TaskFamilySpec {
        images_per_pair,
        image_size: 16,
        seed,
        ..Default::default()
    }
}

/// Tiny spec whose bytes are pinned by the golden file.
fn golden_spec() -> TaskFamilySpec {
    TaskFamilySpec {
        adjectives: 2,
        nouns: 4,
        pairs: vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (1, 3)],
        images_per_pair: 5,
        image_size: 8,
        noise: 0.05,
        seed: 42,
        ..Default::default()
    }
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden.xresdata");

#[test]
fn default_pairs_cover_every_adjective() {
    let pairs = default_pairs(6, 8);
    assert_eq!(pairs.len(), 24);
    assert_eq!(pairs.iter().collect::<HashSet<_>>().len(), 24);
    for a in 0..6 {
        assert!(pairs.iter().filter(|p| p.0 == a).count() >= MIN_NOUNS_PER_ADJECTIVE);
    }
    for n in 0..8 {
        assert!(pairs.iter().any(|p| p.1 == n), "noun {n} unused");
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small(6, 3)).unwrap();
    let b = generate(&small(6, 3)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(6, 4)).unwrap();
    assert_ne!(a.pixels, c.pixels);
}

#[test]
fn labels_form_a_bijection_with_pairs() {
    let ds = generate(&small(5, 1)).unwrap();
    assert_eq!(ds.len(), 24 * 5);
    assert_eq!(ds.class_counts(), [6, 8, 24]);
    for l in &ds.labels {
        assert_eq!(ds.pairs[l.pair as usize], (l.adjective, l.noun));
        assert_eq!(ds.pair_index(l.adjective, l.noun), Some(l.pair));
    }
    assert_eq!(ds.pair_counts(), vec![5; 24]);
    assert_eq!(ds.pair_index(0, 7), None);
}

#[test]
fn classes_are_balanced_and_majority_guess_is_weak() {
    let ds = generate(&small(10, 2)).unwrap();
    for task in 0..3 {
        let k = ds.class_counts()[task];
        let mut counts = vec![0usize; k];
        for l in &ds.labels {
            counts[l.task(task)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "task {task}: {counts:?}");
        let majority = *counts.iter().max().unwrap() as f64 / ds.len() as f64;
        assert!(majority <= 0.25, "task {task}: majority {majority}");
    }
    // every adjective appears with four nouns
    let per_adjective: Vec<usize> = (0..6).map(|a| ds.labels.iter().filter(|l| l.adjective == a).count()).collect();
    assert_eq!(per_adjective, vec![40; 6]);
}

#[test]
fn images_differ_within_a_pair() {
    let ds = generate(&small(5, 9)).unwrap();
    let distinct: HashSet<&[u8]> = (0..ds.len()).map(|i| ds.image_bytes(i)).collect();
    assert_eq!(distinct.len(), ds.len());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = small(5, 0);
    spec.pairs = vec![(0, 0), (0, 1)];
    spec.adjectives = 1;
    assert!(matches!(generate(&spec), Err(Error::Dataset(_))));
    let mut spec = small(5, 0);
    spec.pairs.push((0, 0));
    assert!(generate(&spec).unwrap_err().to_string().contains("twice"));
    let mut spec = small(5, 0);
    spec.pairs[0] = (0, 9);
    assert!(generate(&spec).is_err());
    assert!(generate(&small(4, 0)).is_err());
    let mut spec = small(5, 0);
    spec.noise = 1.5;
    assert!(generate(&spec).is_err());
}

#[test]
fn split_is_stratified_disjoint_and_complete() {
    let ds = generate(&small(12, 5)).unwrap();
    let sp = split(&ds, 1).unwrap();
    assert_eq!(sp.test.len(), 24 * 2);
    assert_eq!(sp.train.len(), 24 * 10);
    let train: HashSet<_> = sp.train.iter().collect();
    let test: HashSet<_> = sp.test.iter().collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), ds.len());
    assert_eq!(ds.subset(&sp.test).pair_counts(), vec![2; 24]);
    assert_eq!(sp, split(&ds, 1).unwrap());
    assert_ne!(sp, split(&ds, 2).unwrap());
    assert!(sp.train.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn split_rejects_tiny_pairs() {
    let ds = generate(&small(6, 0)).unwrap();
    let keep: Vec<usize> = (2..ds.len()).collect();
    let e = split(&ds.subset(&keep), 0).unwrap_err().to_string();
    assert!(e.contains("red:circle"), "{e}");
}

#[test]
fn flip_is_an_involution() {
    let ds = generate(&small(5, 6)).unwrap();
    let s = ds.sample(3);
    let once = flip_horizontal(&s.image);
    assert_ne!(once, s.image);
    assert_eq!(flip_horizontal(&once), s.image);
    let batch = ds.batch::<f32>(&[3], Some(&[true]));
    assert_eq!(batch.data(), once.data());
    assert_eq!(ds.batch::<f32>(&[3], None).data(), s.image.data());
}

#[test]
fn symmetric_image_is_unchanged_by_flip() {
    let image = Tensor::from_fn([3, 4, 4], |k| {
        let x = k % 4;
        (k / 4) as f32 + x.min(3 - x) as f32
    });
    assert_eq!(flip_horizontal(&image), image);
}

#[test]
fn random_flip_rate_is_one_half() {
    let image = Tensor::from_fn([1, 2, 2], |k| k as f32);
    let sample = MultitaskSample {
        image: image.clone(),
        labels: Labels { adjective: 1, noun: 2, pair: 3 },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let mut flipped = 0;
    for _ in 0..n {
        let out = random_flip(&sample, &mut rng);
        assert_eq!(out.labels, sample.labels);
        if out.image != image {
            flipped += 1;
        }
    }
    let rate = flipped as f64 / n as f64;
    assert!((0.47..=0.53).contains(&rate), "{rate}");
}

#[test]
fn round_trip_is_bitwise() {
    let ds = generate(&small(5, 8)).unwrap();
    let bytes = ds.to_bytes();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.xresdata");
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = generate(&small(5, 8)).unwrap().to_bytes();
    match Dataset::from_bytes(&bytes[..bytes.len() - 100]) {
        Err(Error::Truncated { expected, actual, .. }) => {
            assert_eq!(expected, bytes.len());
            assert_eq!(actual, bytes.len() - 100);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
    let mut crc = bytes.clone();
    crc[1000] ^= 0x10;
    assert!(Dataset::from_bytes(&crc).unwrap_err().to_string().contains("CRC32"));
    let mut magic = bytes.clone();
    magic[..8].copy_from_slice(b"NOTADATA");
    assert!(Dataset::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
    assert!(Dataset::from_bytes(&bytes[..5]).is_err());
}

#[test]
fn golden_file_is_stable() {
    let ds = generate(&golden_spec()).unwrap();
    let golden = std::fs::read(GOLDEN).expect("golden dataset file");
    assert_eq!(ds.to_bytes(), golden, "generator output drifted from the golden file");
    assert_eq!(Dataset::from_bytes(&golden).unwrap(), ds);
}
