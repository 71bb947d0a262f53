//! Synthetic attribute–object images: a colored, textured shape per image,
//! labelled with its adjective (color), noun (shape) and their pair.
//!
//! Rendering uses only `+ − × ÷ √` on `f64` so the bytes are identical on
//! every IEEE-754 platform; rotations come from the rational half-angle
//! parametrization rather than `sin`/`cos`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const ADJECTIVES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const NOUNS: [&str; 8] = ["circle", "square", "triangle", "cross", "ring", "star", "crescent", "bar"];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.12],
    [0.15, 0.75, 0.2],
    [0.15, 0.3, 0.9],
    [0.9, 0.85, 0.15],
    [0.85, 0.2, 0.8],
    [0.15, 0.8, 0.85],
];

/// Minimum nouns per adjective.
pub const MIN_NOUNS_PER_ADJECTIVE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamilySpec {
    pub adjectives: usize,
    pub nouns: usize,
    /// Valid `(adjective, noun)` pairs; the index is the pair label.
    pub pairs: Vec<(usize, usize)>,
    pub images_per_pair: usize,
    pub min_images_per_pair: usize,
    pub image_size: usize,
    /// Standard deviation of the additive pixel noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskFamilySpec {
    fn default() -> Self {
        TaskFamilySpec {
            adjectives: 6,
            nouns: 8,
            pairs: default_pairs(6, 8),
            images_per_pair: 500,
            min_images_per_pair: 5,
            image_size: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Adjective `a` takes nouns `3a, 3a+1, 3a+2, 3a+3 (mod nouns)`: four per
/// adjective, with overlapping noun sets between neighbours.
pub fn default_pairs(adjectives: usize, nouns: usize) -> Vec<(usize, usize)> {
    let per = 4.min(nouns);
    (0..adjectives)
        .flat_map(|a| (0..per).map(move |k| (a, (3 * a + k) % nouns)))
        .collect()
}

impl TaskFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.adjectives == 0 || self.adjectives > ADJECTIVES.len() {
            return Err(Error::Dataset(format!("adjectives must be in 1..={}", ADJECTIVES.len())));
        }
        if self.nouns == 0 || self.nouns > NOUNS.len() {
            return Err(Error::Dataset(format!("nouns must be in 1..={}", NOUNS.len())));
        }
        if self.image_size < 8 {
            return Err(Error::Dataset("image_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Dataset("noise must lie in [0, 1]".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::Dataset("no valid pairs".into()));
        }
        for (i, &(a, n)) in self.pairs.iter().enumerate() {
            if a >= self.adjectives || n >= self.nouns {
                return Err(Error::Dataset(format!("pair {i} ({a}, {n}) is out of range")));
            }
            if self.pairs[..i].contains(&(a, n)) {
                return Err(Error::Dataset(format!("pair {}:{} listed twice", ADJECTIVES[a], NOUNS[n])));
            }
        }
        for a in 0..self.adjectives {
            let count = self.pairs.iter().filter(|p| p.0 == a).count();
            if count < MIN_NOUNS_PER_ADJECTIVE {
                return Err(Error::Dataset(format!(
                    "adjective '{}' is paired with {count} nouns, at least {MIN_NOUNS_PER_ADJECTIVE} required",
                    ADJECTIVES[a]
                )));
            }
        }
        if self.images_per_pair < self.min_images_per_pair {
            return Err(Error::Dataset(format!(
                "images_per_pair {} is below the minimum {}",
                self.images_per_pair, self.min_images_per_pair
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Labels {
    pub adjective: u16,
    pub noun: u16,
    pub pair: u16,
}

impl Labels {
    /// Label for task `0` (adjective), `1` (noun) or `2` (pair).
    pub fn task(&self, task: usize) -> usize {
        match task {
            0 => self.adjective as usize,
            1 => self.noun as usize,
            _ => self.pair as usize,
        }
    }
}

/// One image `[3, H, W]` in `[0, 1]` with its label triple.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskSample {
    pub image: Tensor<f32>,
    pub labels: Labels,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub seed: u64,
    pub image_size: usize,
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
    /// `pairs[p] = (adjective, noun)`.
    pub pairs: Vec<(u16, u16)>,
    /// `H·W·3` bytes per sample, row-major RGB.
    pub pixels: Vec<u8>,
    pub labels: Vec<Labels>,
}

pub const TASK_NAMES: [&str; 3] = ["adjective", "noun", "pair"];

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_bytes(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let s = self.sample_bytes();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Class counts in task order (adjective, noun, pair).
    pub fn class_counts(&self) -> [usize; 3] {
        [self.adjectives.len(), self.nouns.len(), self.pairs.len()]
    }

    pub fn pair_index(&self, adjective: u16, noun: u16) -> Option<u16> {
        self.pairs.iter().position(|&p| p == (adjective, noun)).map(|p| p as u16)
    }

    pub fn sample(&self, i: usize) -> MultitaskSample {
        let s = self.image_size;
        let bytes = self.image_bytes(i);
        let hw = s * s;
        let image = Tensor::from_fn([3, s, s], |k| {
            let (c, p) = (k / hw, k % hw);
            bytes[p * 3 + c] as f32 / 255.0
        });
        MultitaskSample {
            image,
            labels: self.labels[i],
        }
    }

    /// Stacks samples into `[N, 3, H, W]`, mirroring those with `flip[k]` set.
    pub fn batch<T: Element>(&self, indices: &[usize], flip: Option<&[bool]>) -> Tensor<T> {
        let s = self.image_size;
        let hw = s * s;
        let per = 3 * hw;
        let mut data = vec![T::zero(); indices.len() * per];
        for (k, &i) in indices.iter().enumerate() {
            let bytes = self.image_bytes(i);
            let mirrored = flip.is_some_and(|f| f[k]);
            let out = &mut data[k * per..(k + 1) * per];
            for y in 0..s {
                for x in 0..s {
                    let src = if mirrored { s - 1 - x } else { x };
                    for c in 0..3 {
                        out[c * hw + y * s + x] = T::of(bytes[(y * s + src) * 3 + c] as f64 / 255.0);
                    }
                }
            }
        }
        Tensor::new([indices.len(), 3, s, s], data).expect("batch extents")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_bytes());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            seed: self.seed,
            image_size: self.image_size,
            adjectives: self.adjectives.clone(),
            nouns: self.nouns.clone(),
            pairs: self.pairs.clone(),
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Sample count per pair label.
    pub fn pair_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.pairs.len()];
        for l in &self.labels {
            counts[l.pair as usize] += 1;
        }
        counts
    }
}

/// Rational rotation: `cos θ`, `sin θ` for `t = tan(θ/2)`.
fn rotation(t: f64) -> (f64, f64) {
    let d = 1.0 + t * t;
    ((1.0 - t * t) / d, 2.0 * t / d)
}

fn inside_polygon(u: f64, v: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const TRIANGLE: [(f64, f64); 3] = [(0.0, -1.0), (0.866_025_403_784_438_6, 0.5), (-0.866_025_403_784_438_6, 0.5)];

const STAR: [(f64, f64); 10] = [
    (0.0, -1.0),
    (0.235_114_100_916_989_4, -0.323_606_797_749_979),
    (0.951_056_516_295_153_5, -0.309_016_994_374_947_4),
    (0.380_422_606_518_061_2, 0.123_606_797_749_979),
    (0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    (0.0, 0.4),
    (-0.587_785_252_292_473_1, 0.809_016_994_374_947_5),
    (-0.380_422_606_518_061_2, 0.123_606_797_749_979),
    (-0.951_056_516_295_153_5, -0.309_016_994_374_947_4),
    (-0.235_114_100_916_989_4, -0.323_606_797_749_979),
];

/// Whether canonical point `(u, v)` (shape radius 1) lies in noun `n`.
fn inside(noun: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match noun {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => inside_polygon(u, v, &TRIANGLE),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.3..=1.0).contains(&r2),
        5 => inside_polygon(u, v, &STAR),
        6 => {
            let (du, dv) = (u - 0.45, v - 0.15);
            r2 <= 1.0 && du * du + dv * dv > 0.6
        }
        _ => u.abs() <= 1.0 && v.abs() <= 0.3,
    }
}

/// Approximately standard normal: centred sum of four uniforms, rescaled.
fn noise_sample(rng: &mut ChaCha8Rng) -> f64 {
    let s: f64 = (0..4).map(|_| rng.random::<f64>()).sum();
    (s - 2.0) * 3.0f64.sqrt()
}

fn render(spec: &TaskFamilySpec, adjective: usize, noun: usize, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    let s = spec.image_size as f64;
    let cx = s * (0.5 + rng.random_range(-0.15..0.15));
    let cy = s * (0.5 + rng.random_range(-0.15..0.15));
    let radius = s * rng.random_range(0.26..0.38);
    let (cos, sin) = rotation(rng.random_range(-0.18..0.18));

    // colour: jittered palette entry under a random tinted illuminant
    let light: f64 = rng.random_range(0.55..1.0);
    let tint: Vec<f64> = (0..3).map(|_| light * rng.random_range(0.75..1.25)).collect();
    let mut fg = PALETTE[adjective];
    for (c, v) in fg.iter_mut().enumerate() {
        *v = ((*v + rng.random_range(-0.2..0.2)) * tint[c]).clamp(0.0, 1.0);
    }
    let grey: f64 = rng.random_range(0.15..0.5);
    let bg: Vec<f64> = (0..3).map(|_| (grey + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)).collect();

    // texture overlay: stripes, checks or none, blending towards a random colour
    let texture = rng.random_range(0..3u32);
    let period: f64 = rng.random_range(3.0..7.0);
    let phase = rng.random_range(0.0..period);
    let depth = rng.random_range(0.25..0.6);
    let overlay: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
    let (tcos, tsin) = rotation(rng.random_range(-1.0..1.0));
    let blend = |x: f64, y: f64| -> f64 {
        let a = ((x * tcos + y * tsin + phase) / period).floor() as i64;
        let b = ((y * tcos - x * tsin + phase) / period).floor() as i64;
        match texture {
            0 if a.rem_euclid(2) == 1 => depth,
            1 if (a + b).rem_euclid(2) == 1 => depth,
            _ => 0.0,
        }
    };

    let size = spec.image_size;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f64 + 0.25 + 0.5 * sx as f64;
                    let y = py as f64 + 0.25 + 0.5 * sy as f64;
                    let (dx, dy) = ((x - cx) / radius, (y - cy) / radius);
                    let (u, v) = (dx * cos + dy * sin, dy * cos - dx * sin);
                    if inside(noun, u, v) {
                        let k = blend(x, y);
                        for c in 0..3 {
                            acc[c] += fg[c] * (1.0 - k) + overlay[c] * k;
                        }
                    } else {
                        for c in 0..3 {
                            acc[c] += bg[c];
                        }
                    }
                }
            }
            for c in 0..3 {
                let mut value = acc[c] / 4.0;
                if spec.noise > 0.0 {
                    value += spec.noise * noise_sample(rng);
                }
                out[(py * size + px) * 3 + c] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
}

/// Renders `images_per_pair` samples for every pair, ordered by pair.
/// Sample `k` draws from its own ChaCha stream `(seed, k)`.
pub fn generate(spec: &TaskFamilySpec) -> Result<Dataset> {
    spec.validate()?;
    let per = spec.image_size * spec.image_size * 3;
    let total = spec.pairs.len() * spec.images_per_pair;
    let mut pixels = vec![0u8; total * per];
    let mut labels = Vec::with_capacity(total);
    for (p, &(a, n)) in spec.pairs.iter().enumerate() {
        for i in 0..spec.images_per_pair {
            let k = p * spec.images_per_pair + i;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            render(spec, a, n, &mut rng, &mut pixels[k * per..(k + 1) * per]);
            labels.push(Labels {
                adjective: a as u16,
                noun: n as u16,
                pair: p as u16,
            });
        }
    }
    Ok(Dataset {
        seed: spec.seed,
        image_size: spec.image_size,
        adjectives: ADJECTIVES[..spec.adjectives].iter().map(|s| s.to_string()).collect(),
        nouns: NOUNS[..spec.nouns].iter().map(|s| s.to_string()).collect(),
        pairs: spec.pairs.iter().map(|&(a, n)| (a as u16, n as u16)).collect(),
        pixels,
        labels,
    })
}

/// Index lists of a stratified split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per pair, `floor(n / 5)` shuffled samples go to test and the rest to
/// train. Both lists are returned in ascending order.
pub fn split(ds: &Dataset, seed: u64) -> Result<Split> {
    let mut by_pair: Vec<Vec<usize>> = vec![Vec::new(); ds.pairs.len()];
    for (i, l) in ds.labels.iter().enumerate() {
        by_pair[l.pair as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, mut idx) in by_pair.into_iter().enumerate() {
        if idx.len() < 5 {
            let (a, n) = ds.pairs[p];
            return Err(Error::Dataset(format!(
                "pair {}:{} has {} samples, at least 5 are needed to split",
                ds.adjectives[a as usize],
                ds.nouns[n as usize],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = idx.len() / 5;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Mirrors `[C, H, W]` left to right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        _ => panic!("flip_horizontal expects [C, H, W]"),
    };
    let d = image.data();
    Tensor::from_fn([c, h, w], |k| {
        let x = k % w;
        d[k - x + (w - 1 - x)]
    })
}

/// Horizontal mirror with probability one half; labels unchanged.
pub fn random_flip<R: Rng + ?Sized>(sample: &MultitaskSample, rng: &mut R) -> MultitaskSample {
    if rng.random_bool(0.5) {
        MultitaskSample {
            image: flip_horizontal(&sample.image),
            labels: sample.labels,
        }
    } else {
        sample.clone()
    }
}

pub const DATA_MAGIC: &[u8; 8] = b"XRESDATA";
pub const DATA_VERSION: u32 = 1;

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Dataset {
    /// Serializes to the little-endian `XRESDATA` layout with a trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.pixels.len() + 6 * self.len());
        out.extend_from_slice(DATA_MAGIC);
        put_u32(&mut out, DATA_VERSION);
        put_u64(&mut out, self.seed);
        put_u32(&mut out, self.image_size as u32);
        put_u32(&mut out, self.adjectives.len() as u32);
        put_u32(&mut out, self.nouns.len() as u32);
        put_u32(&mut out, self.pairs.len() as u32);
        put_u64(&mut out, self.len() as u64);
        for name in self.adjectives.iter().chain(&self.nouns) {
            put_str(&mut out, name);
        }
        for &(a, n) in &self.pairs {
            put_u16(&mut out, a);
            put_u16(&mut out, n);
        }
        for (i, l) in self.labels.iter().enumerate() {
            out.extend_from_slice(self.image_bytes(i));
            put_u16(&mut out, l.adjective);
            put_u16(&mut out, l.noun);
            put_u16(&mut out, l.pair);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(8)? != DATA_MAGIC {
            return Err(Error::format("dataset", "bad magic, not an XRESDATA file"));
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let image_size = r.u32()? as usize;
        let (na, nn, np) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let count = r.u64()? as usize;
        let mut names = Vec::with_capacity(na + nn);
        for _ in 0..na + nn {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("dataset", "class name is not UTF-8"))?;
            names.push(s.to_string());
        }
        let nouns = names.split_off(na);
        let mut pairs = Vec::with_capacity(np);
        for p in 0..np {
            let (a, n) = (r.u16()?, r.u16()?);
            if a as usize >= na || n as usize >= nn {
                return Err(Error::format("dataset", format!("pair {p} ({a}, {n}) out of range")));
            }
            pairs.push((a, n));
        }
        let per = image_size * image_size * 3;
        let expected = r.pos + count * (per + 6) + 4;
        if bytes.len() != expected {
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    what: "dataset",
                    expected,
                    actual: bytes.len(),
                });
            }
            return Err(Error::format(
                "dataset",
                format!("expected {expected} bytes but found {}", bytes.len()),
            ));
        }
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..expected - 4]) != stored {
            return Err(Error::format("dataset", "CRC32 mismatch"));
        }
        let mut pixels = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            pixels.extend_from_slice(r.take(per)?);
            let l = Labels {
                adjective: r.u16()?,
                noun: r.u16()?,
                pair: r.u16()?,
            };
            let valid = (l.pair as usize) < np && pairs[l.pair as usize] == (l.adjective, l.noun);
            if !valid {
                return Err(Error::format("dataset", format!("sample {i} labels disagree with the pair map")));
            }
            labels.push(l);
        }
        Ok(Dataset {
            seed,
            image_size,
            adjectives: names,
            nouns,
            pairs,
            pixels,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_bytes(&fs::read(path)?)
    }
}

/// Little-endian cursor that reports truncation against the bytes needed.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                what: self.what,
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
