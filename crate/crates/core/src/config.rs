//! Line-based run configuration: `[section]` headers and `key = value`
//! lines, `#` comments. Unknown sections and keys are rejected with their
//! line number.

use std::fmt::Write as _;

use crate::arch::{ArchSpec, BranchPoint, Head, Pool, Stage, Stem, Variant};
use crate::data::{TaskFamilySpec, ADJECTIVES, NOUNS};
use crate::train::{EvalConfig, TrainConfig};

/// A configuration problem at a given 1-based line (0 for file-level).
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

pub struct KeyDoc {
    pub section: &'static str,
    pub key: &'static str,
    pub doc: &'static str,
}

/// Every accepted key.
pub const KEYS: &[KeyDoc] = &[
    KeyDoc { section: "data", key: "adjectives", doc: "number of colour classes (1-6)" },
    KeyDoc { section: "data", key: "nouns", doc: "number of shape classes (1-8)" },
    KeyDoc { section: "data", key: "pairs", doc: "valid pairs as colour:shape list, or 'default'" },
    KeyDoc { section: "data", key: "images_per_pair", doc: "samples rendered per pair" },
    KeyDoc { section: "data", key: "min_images_per_pair", doc: "lower bound enforced on images_per_pair" },
    KeyDoc { section: "data", key: "image_size", doc: "square image side in pixels" },
    KeyDoc { section: "data", key: "noise", doc: "pixel noise standard deviation in [0, 1]" },
    KeyDoc { section: "data", key: "seed", doc: "generator seed" },
    KeyDoc { section: "data", key: "split_seed", doc: "seed of the stratified 80/20 split" },
    KeyDoc { section: "arch", key: "preset", doc: "resnet50 | resnet50-multitask | mini; applied before other arch keys" },
    KeyDoc { section: "arch", key: "in_channels", doc: "input channels" },
    KeyDoc { section: "arch", key: "input_size", doc: "input side in pixels" },
    KeyDoc { section: "arch", key: "stem", doc: "channels:kernel:stride:pad of the first convolution" },
    KeyDoc { section: "arch", key: "pool", doc: "kernel:stride:pad of the stem max pool, or none" },
    KeyDoc { section: "arch", key: "stages", doc: "comma list of mid:out:blocks:stride" },
    KeyDoc { section: "arch", key: "branch", doc: "stage.block (1-based) of the last shared block, or none" },
    KeyDoc { section: "arch", key: "heads", doc: "comma list of name:classes" },
    KeyDoc { section: "arch", key: "cross_layers", doc: "task blocks after the branch carrying cross weights" },
    KeyDoc { section: "arch", key: "variant", doc: "x0 | xi | xs cross weighting" },
    KeyDoc { section: "train", key: "batch_size", doc: "samples per SGD step" },
    KeyDoc { section: "train", key: "lr", doc: "initial learning rate" },
    KeyDoc { section: "train", key: "momentum", doc: "SGD momentum" },
    KeyDoc { section: "train", key: "weight_decay", doc: "L2 decay on conv/fc weights and cross scales" },
    KeyDoc { section: "train", key: "lr_drop_factor", doc: "divisor applied on a plateau" },
    KeyDoc { section: "train", key: "plateau_window", doc: "evaluations without progress before a drop" },
    KeyDoc { section: "train", key: "plateau_min_rel", doc: "relative eval-loss improvement counted as progress" },
    KeyDoc { section: "train", key: "max_drops", doc: "drops before the next plateau stops training" },
    KeyDoc { section: "train", key: "epochs", doc: "maximum passes over the training split" },
    KeyDoc { section: "train", key: "seed", doc: "initialization, shuffling and flip seed" },
    KeyDoc { section: "train", key: "flip", doc: "random horizontal flips (true | false)" },
    KeyDoc { section: "eval", key: "interval", doc: "SGD steps between evaluations, 0 = once per epoch" },
    KeyDoc { section: "eval", key: "batch_size", doc: "evaluation batch size" },
];

/// `--help` text listing every key.
pub fn key_help() -> String {
    let mut out = String::from("Config keys:\n");
    let mut section = "";
    for k in KEYS {
        if k.section != section {
            section = k.section;
            let _ = writeln!(out, "  [{section}]");
        }
        let _ = writeln!(out, "    {:<20} {}", k.key, k.doc);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: TaskFamilySpec,
    pub split_seed: u64,
    pub arch: ArchSpec,
    pub variant: Variant,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = TaskFamilySpec::default();
        let arch = ArchSpec::mini(&ArchSpec::synthetic_heads(data.adjectives, data.nouns, data.pairs.len()));
        RunConfig {
            data,
            split_seed: 0,
            arch,
            variant: Variant::Xs,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.trim().parse().map_err(|_| format!("{what}: cannot parse '{}'", v.trim()))
}

fn parse_tuple(v: &str, n: usize, what: &str) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = v.trim().split(':').collect();
    if parts.len() != n {
        return Err(format!("{what}: expected {n} ':'-separated numbers, got '{}'", v.trim()));
    }
    parts.iter().map(|p| parse_num(p, what)).collect()
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_pairs(v: &str, data: &TaskFamilySpec) -> Result<Vec<(usize, usize)>, String> {
    if v.trim() == "default" {
        return Ok(crate::data::default_pairs(data.adjectives, data.nouns));
    }
    list(v)
        .map(|item| {
            let (a, n) = item
                .split_once(':')
                .ok_or_else(|| format!("pair '{item}' is not colour:shape"))?;
            let a = ADJECTIVES[..data.adjectives]
                .iter()
                .position(|&x| x == a.trim())
                .ok_or_else(|| format!("unknown colour '{}' in pair '{item}'", a.trim()))?;
            let n = NOUNS[..data.nouns]
                .iter()
                .position(|&x| x == n.trim())
                .ok_or_else(|| format!("unknown shape '{}' in pair '{item}'", n.trim()))?;
            Ok((a, n))
        })
        .collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn preset(name: &str, heads: &[Head]) -> Result<ArchSpec, String> {
    let list: Vec<(&str, usize)> = heads.iter().map(|h| (h.name.as_str(), h.classes)).collect();
    match name.trim() {
        "resnet50" => Ok(ArchSpec::resnet50(&list)),
        "resnet50-multitask" => Ok(ArchSpec::resnet50_multitask(&list)),
        "mini" => Ok(ArchSpec::mini(&list)),
        other => Err(format!("unknown preset '{other}'")),
    }
}

/// Applies one `[arch]` key.
pub fn set_arch_key(spec: &mut ArchSpec, variant: &mut Variant, key: &str, v: &str) -> Result<(), String> {
    match key {
        "preset" => *spec = preset(v, &spec.heads)?,
        "in_channels" => spec.in_channels = parse_num(v, key)?,
        "input_size" => spec.input_size = parse_num(v, key)?,
        "stem" => {
            let t = parse_tuple(v, 4, key)?;
            spec.stem = Stem {
                channels: t[0],
                kernel: t[1],
                stride: t[2],
                pad: t[3],
                pool: spec.stem.pool,
            };
        }
        "pool" => {
            spec.stem.pool = if v.trim() == "none" {
                None
            } else {
                let t = parse_tuple(v, 3, key)?;
                Some(Pool {
                    kernel: t[0],
                    stride: t[1],
                    pad: t[2],
                })
            }
        }
        "stages" => {
            spec.stages = list(v)
                .map(|s| {
                    let t = parse_tuple(s, 4, key)?;
                    Ok(Stage {
                        mid: t[0],
                        out: t[1],
                        blocks: t[2],
                        stride: t[3],
                    })
                })
                .collect::<Result<_, String>>()?;
        }
        "branch" => {
            spec.branch = if v.trim() == "none" {
                None
            } else {
                let (s, b) = v.trim().split_once('.').ok_or("branch: expected stage.block or none")?;
                let (s, b): (usize, usize) = (parse_num(s, key)?, parse_num(b, key)?);
                if s == 0 || b == 0 {
                    return Err("branch: stage and block are 1-based".into());
                }
                Some(BranchPoint { stage: s - 1, block: b - 1 })
            }
        }
        "heads" => {
            spec.heads = list(v)
                .map(|h| {
                    let (name, classes) = h.split_once(':').ok_or_else(|| format!("head '{h}' is not name:classes"))?;
                    Ok(Head {
                        name: name.trim().to_string(),
                        classes: parse_num(classes, "heads")?,
                    })
                })
                .collect::<Result<_, String>>()?;
        }
        "cross_layers" => spec.cross_layers = parse_num(v, key)?,
        "variant" => *variant = Variant::parse(v).ok_or_else(|| format!("unknown variant '{}'", v.trim()))?,
        _ => return Err(format!("unknown key '{key}' in [arch]")),
    }
    Ok(())
}

/// `[arch]` lines for a spec and variant.
pub fn arch_section(spec: &ArchSpec, variant: Variant) -> String {
    let mut out = String::new();
    let st = &spec.stem;
    let _ = writeln!(out, "in_channels = {}", spec.in_channels);
    let _ = writeln!(out, "input_size = {}", spec.input_size);
    let _ = writeln!(out, "stem = {}:{}:{}:{}", st.channels, st.kernel, st.stride, st.pad);
    match st.pool {
        Some(p) => {
            let _ = writeln!(out, "pool = {}:{}:{}", p.kernel, p.stride, p.pad);
        }
        None => out.push_str("pool = none\n"),
    }
    let stages: Vec<String> = spec
        .stages
        .iter()
        .map(|s| format!("{}:{}:{}:{}", s.mid, s.out, s.blocks, s.stride))
        .collect();
    let _ = writeln!(out, "stages = {}", stages.join(", "));
    match spec.branch {
        Some(b) => {
            let _ = writeln!(out, "branch = {}.{}", b.stage + 1, b.block + 1);
        }
        None => out.push_str("branch = none\n"),
    }
    let heads: Vec<String> = spec.heads.iter().map(|h| format!("{}:{}", h.name, h.classes)).collect();
    let _ = writeln!(out, "heads = {}", heads.join(", "));
    let _ = writeln!(out, "cross_layers = {}", spec.cross_layers);
    let _ = writeln!(out, "variant = {variant}");
    out
}

/// Splits text into `(line, section, key, value)` entries.
fn entries(text: &str) -> Result<Vec<(usize, String, String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header '{s}'")))?
                .trim();
            if !["data", "arch", "train", "eval"].contains(&name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key = value, got '{s}'")))?;
        let sec = section
            .clone()
            .ok_or_else(|| err(line, "key outside of any section"))?;
        let k = k.trim();
        if !KEYS.iter().any(|d| d.section == sec && d.key == k) {
            return Err(err(line, format!("unknown key '{k}' in [{sec}]")));
        }
        if out.iter().any(|(_, s2, k2, _): &(usize, String, String, String)| *s2 == sec && k2 == k) {
            return Err(err(line, format!("duplicate key '{k}' in [{sec}]")));
        }
        out.push((line, sec, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses only `[arch]`-style lines (no header needed).
pub fn parse_arch(text: &str) -> Result<(ArchSpec, Variant), ConfigError> {
    let cfg = RunConfig::parse(&format!("[arch]\n{text}"))?;
    Ok((cfg.arch, cfg.variant))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let entries = entries(text)?;
        let mut cfg = RunConfig::default();
        let line_of = |sec: &str, key: &str| {
            entries
                .iter()
                .find(|e| e.1 == sec && e.2 == key)
                .map_or(0, |e| e.0)
        };

        // ordering-sensitive keys first: counts before pair names, preset before overrides
        let mut ordered: Vec<&(usize, String, String, String)> = entries.iter().collect();
        let rank = |e: &&(usize, String, String, String)| match (e.1.as_str(), e.2.as_str()) {
            ("data", "adjectives" | "nouns") | ("arch", "preset") => 0,
            ("arch", "heads") => 1,
            _ => 2,
        };
        ordered.sort_by_key(|e| (rank(e), e.0));
        let mut pairs_given = false;
        let mut heads_given = false;
        for (line, sec, key, v) in ordered {
            let line = *line;
            let r: Result<(), String> = (|| {
                match sec.as_str() {
                    "data" => {
                        let d = &mut cfg.data;
                        match key.as_str() {
                            "adjectives" => d.adjectives = parse_num(v, key)?,
                            "nouns" => d.nouns = parse_num(v, key)?,
                            "pairs" => {
                                d.pairs = parse_pairs(v, d)?;
                                pairs_given = true;
                            }
                            "images_per_pair" => d.images_per_pair = parse_num(v, key)?,
                            "min_images_per_pair" => d.min_images_per_pair = parse_num(v, key)?,
                            "image_size" => d.image_size = parse_num(v, key)?,
                            "noise" => d.noise = parse_num(v, key)?,
                            "seed" => d.seed = parse_num(v, key)?,
                            "split_seed" => cfg.split_seed = parse_num(v, key)?,
                            _ => unreachable!("key table"),
                        }
                    }
                    "arch" => {
                        if key == "heads" {
                            heads_given = true;
                        }
                        set_arch_key(&mut cfg.arch, &mut cfg.variant, key, v)?
                    }
                    "train" => {
                        let t = &mut cfg.train;
                        match key.as_str() {
                            "batch_size" => t.batch_size = parse_num(v, key)?,
                            "lr" => t.lr = parse_num(v, key)?,
                            "momentum" => t.momentum = parse_num(v, key)?,
                            "weight_decay" => t.weight_decay = parse_num(v, key)?,
                            "lr_drop_factor" => t.lr_drop_factor = parse_num(v, key)?,
                            "plateau_window" => t.plateau_window = parse_num(v, key)?,
                            "plateau_min_rel" => t.plateau_min_rel = parse_num(v, key)?,
                            "max_drops" => t.max_drops = parse_num(v, key)?,
                            "epochs" => t.epochs = parse_num(v, key)?,
                            "seed" => t.seed = parse_num(v, key)?,
                            "flip" => t.flip = parse_bool(v)?,
                            _ => unreachable!("key table"),
                        }
                    }
                    _ => match key.as_str() {
                        "interval" => cfg.eval.interval = parse_num(v, key)?,
                        "batch_size" => cfg.eval.batch_size = parse_num(v, key)?,
                        _ => unreachable!("key table"),
                    },
                }
                Ok(())
            })();
            r.map_err(|m| err(line, m))?;
        }
        if !pairs_given && (line_of("data", "adjectives") > 0 || line_of("data", "nouns") > 0) {
            cfg.data.pairs = crate::data::default_pairs(cfg.data.adjectives, cfg.data.nouns);
        }
        if !heads_given {
            // heads follow the dataset unless given explicitly
            let d = &cfg.data;
            cfg.arch.heads = ArchSpec::mini(&ArchSpec::synthetic_heads(d.adjectives, d.nouns, d.pairs.len())).heads;
        }

        cfg.data.validate().map_err(|e| {
            let line = [line_of("data", "pairs"), line_of("data", "images_per_pair"), line_of("data", "adjectives")]
                .into_iter()
                .find(|&l| l > 0)
                .unwrap_or(0);
            err(line, e.to_string())
        })?;
        cfg.arch.validate().map_err(|e| {
            let key = match &e {
                crate::Error::Spec { location, .. } => location
                    .strip_prefix("arch.")
                    .unwrap_or("")
                    .split(['.', '['])
                    .next()
                    .unwrap_or("")
                    .to_string(),
                _ => String::new(),
            };
            let line = line_of("arch", &key);
            err(if line > 0 { line } else { line_of("arch", "preset") }, e.to_string())
        })?;
        cfg.train.validate().map_err(|m| err(0, format!("[train] {m}")))?;
        if cfg.eval.batch_size == 0 {
            return Err(err(line_of("eval", "batch_size"), "eval batch_size must be positive"));
        }
        Ok(cfg)
    }

    /// Writes every key explicitly; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let d = &self.data;
        let pairs: Vec<String> = d
            .pairs
            .iter()
            .map(|&(a, n)| format!("{}:{}", ADJECTIVES[a], NOUNS[n]))
            .collect();
        let t = &self.train;
        format!(
            "[data]\nadjectives = {}\nnouns = {}\npairs = {}\nimages_per_pair = {}\nmin_images_per_pair = {}\nimage_size = {}\nnoise = {:?}\nseed = {}\nsplit_seed = {}\n\n\
             [arch]\n{}\n\
             [train]\nbatch_size = {}\nlr = {:?}\nmomentum = {:?}\nweight_decay = {:?}\nlr_drop_factor = {:?}\nplateau_window = {}\nplateau_min_rel = {:?}\nmax_drops = {}\nepochs = {}\nseed = {}\nflip = {}\n\n\
             [eval]\ninterval = {}\nbatch_size = {}\n",
            d.adjectives,
            d.nouns,
            pairs.join(", "),
            d.images_per_pair,
            d.min_images_per_pair,
            d.image_size,
            d.noise,
            d.seed,
            self.split_seed,
            arch_section(&self.arch, self.variant),
            t.batch_size,
            t.lr,
            t.momentum,
            t.weight_decay,
            t.lr_drop_factor,
            t.plateau_window,
            t.plateau_min_rel,
            t.max_drops,
            t.epochs,
            t.seed,
            t.flip,
            self.eval.interval,
            self.eval.batch_size,
        )
    }
}
