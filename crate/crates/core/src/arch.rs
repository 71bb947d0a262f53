//! Architecture specs, network construction, initialization and parameter
//! accounting for bottleneck ResNets and their branched multitask forms.
//!
//! A branched network shares a trunk up to the branch-entry block. That
//! block ends at the elementwise addition; its batch norm and ReLU are
//! replicated once per task. Every later block of the final stage is owned
//! per task and is evaluated as a cross-residual layer whose shortcut sums
//! the inputs of all tasks.

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{
    cross_residual_block, residual_block, ConvStack, CrossResidualBlockParams, CrossWeight, NormParams, Pass,
    PostActivation, Projection, ResidualBlockParams, Shortcut,
};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, RunningStats, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stem {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<Pool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// A run of bottleneck blocks `in → mid → out`; the stride applies to the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub mid: usize,
    pub out: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub name: String,
    pub classes: usize,
}

/// The last shared block, as zero-based stage and block indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchPoint {
    pub stage: usize,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    /// `None` builds the canonical unbranched network.
    pub branch: Option<BranchPoint>,
    pub heads: Vec<Head>,
    /// Per-task blocks (counted from the branch) that carry cross weights.
    pub cross_layers: usize,
}

/// How the `j → t` shortcuts with `j ≠ t` are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    X0,
    XI,
    Xs,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::X0, Variant::XI, Variant::Xs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::X0 => "x0",
            Variant::XI => "xi",
            Variant::Xs => "xs",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x0" => Some(Variant::X0),
            "xi" => Some(Variant::XI),
            "xs" => Some(Variant::Xs),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn heads(list: &[(&str, usize)]) -> Vec<Head> {
    list.iter()
        .map(|&(name, classes)| Head {
            name: name.to_string(),
            classes,
        })
        .collect()
}

impl ArchSpec {
    /// 50-layer bottleneck ResNet on 224×224 input, unbranched.
    pub fn resnet50(head_list: &[(&str, usize)]) -> Self {
        ArchSpec {
            in_channels: 3,
            input_size: 224,
            stem: Stem {
                channels: 64,
                kernel: 7,
                stride: 2,
                pad: 3,
                pool: Some(Pool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                }),
            },
            stages: vec![
                Stage { mid: 64, out: 256, blocks: 3, stride: 1 },
                Stage { mid: 128, out: 512, blocks: 4, stride: 2 },
                Stage { mid: 256, out: 1024, blocks: 6, stride: 2 },
                Stage { mid: 512, out: 2048, blocks: 3, stride: 2 },
            ],
            branch: None,
            heads: heads(head_list),
            cross_layers: 0,
        }
    }

    /// ResNet-50 forking after the first block of the final stage, with the
    /// two remaining blocks per task as cross-residual layers.
    pub fn resnet50_multitask(head_list: &[(&str, usize)]) -> Self {
        ArchSpec {
            branch: Some(BranchPoint { stage: 3, block: 0 }),
            cross_layers: 2,
            ..ArchSpec::resnet50(head_list)
        }
    }

    /// Desk-scale branched network on 32×32 input.
    pub fn mini(head_list: &[(&str, usize)]) -> Self {
        ArchSpec {
            in_channels: 3,
            input_size: 32,
            stem: Stem {
                channels: 16,
                kernel: 3,
                stride: 1,
                pad: 1,
                pool: Some(Pool {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                }),
            },
            stages: vec![
                Stage { mid: 8, out: 32, blocks: 2, stride: 1 },
                Stage { mid: 16, out: 64, blocks: 2, stride: 2 },
                Stage { mid: 32, out: 128, blocks: 3, stride: 2 },
            ],
            branch: Some(BranchPoint { stage: 2, block: 0 }),
            heads: heads(head_list),
            cross_layers: 2,
        }
    }

    /// Three heads matching the synthetic dataset's task order.
    pub fn synthetic_heads(adjectives: usize, nouns: usize, pairs: usize) -> Vec<(&'static str, usize)> {
        vec![("adjective", adjectives), ("noun", nouns), ("pair", pairs)]
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.out)
    }

    /// Number of per-task blocks after the branch-entry block.
    pub fn task_blocks(&self) -> usize {
        match self.branch {
            Some(b) => self.stages[b.stage].blocks - b.block - 1,
            None => 0,
        }
    }

    fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
    }

    /// Spatial extent after every stage, checking that no layer collapses.
    fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut s = Self::conv_out(self.input_size, self.stem.kernel, self.stem.stride, self.stem.pad)
            .ok_or_else(|| Error::spec("arch.stem", "kernel larger than the padded input"))?;
        if let Some(p) = self.stem.pool {
            s = Self::conv_out(s, p.kernel, p.stride, p.pad)
                .ok_or_else(|| Error::spec("arch.pool", "kernel larger than the padded input"))?;
        }
        let mut sizes = Vec::new();
        for stage in &self.stages {
            s = (s - 1) / stage.stride + 1;
            sizes.push(s);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, loc: &str| {
            if v == 0 {
                Err(Error::spec(loc, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive(self.in_channels, "arch.in_channels")?;
        positive(self.input_size, "arch.input_size")?;
        positive(self.stem.channels, "arch.stem.channels")?;
        positive(self.stem.kernel, "arch.stem.kernel")?;
        positive(self.stem.stride, "arch.stem.stride")?;
        if let Some(p) = self.stem.pool {
            positive(p.kernel, "arch.pool.kernel")?;
            positive(p.stride, "arch.pool.stride")?;
        }
        if self.stages.is_empty() {
            return Err(Error::spec("arch.stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let loc = format!("arch.stages[{}]", i + 1);
            for v in [s.mid, s.out, s.blocks, s.stride] {
                positive(v, &loc)?;
            }
        }
        self.spatial_sizes()?;
        if self.heads.is_empty() {
            return Err(Error::spec("arch.heads", "at least one head is required"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            let loc = format!("arch.heads[{}]", i + 1);
            if h.classes == 0 {
                return Err(Error::spec(loc, format!("head '{}' has no classes", h.name)));
            }
            let valid = !h.name.is_empty() && h.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(Error::spec(loc, format!("head name '{}' must be alphanumeric", h.name)));
            }
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return Err(Error::spec(loc, format!("duplicate head name '{}'", h.name)));
            }
        }
        match self.branch {
            None => {
                if self.cross_layers != 0 {
                    return Err(Error::spec("arch.cross_layers", "cross layers need a branch point"));
                }
            }
            Some(b) => {
                if b.stage + 1 != self.stages.len() {
                    return Err(Error::spec(
                        "arch.branch",
                        "the branch must lie in the final stage so task blocks keep one shape",
                    ));
                }
                if b.block >= self.stages[b.stage].blocks {
                    return Err(Error::spec(
                        "arch.branch",
                        format!("stage {} has only {} blocks", b.stage + 1, self.stages[b.stage].blocks),
                    ));
                }
                if self.cross_layers > self.task_blocks() {
                    return Err(Error::spec(
                        "arch.cross_layers",
                        format!("{} cross layers but only {} blocks follow the branch", self.cross_layers, self.task_blocks()),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// What a parameter is, which fixes its initialization and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Conv { fan_in: usize, fan_out: usize },
    FcWeight { fan_in: usize, fan_out: usize },
    FcBias,
    NormGamma,
    NormBeta,
    CrossScale { channels: usize },
}

impl ParamKind {
    /// Weight decay applies to conv/fc weights and scaling vectors only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Conv { .. } | ParamKind::FcWeight { .. } | ParamKind::CrossScale { .. })
    }

    /// `n_l` of the Gaussian init rule, or `None` for constant-initialized kinds.
    pub fn init_units(self) -> Option<f64> {
        match self {
            ParamKind::Conv { fan_in, fan_out } | ParamKind::FcWeight { fan_in, fan_out } => {
                Some((fan_in + fan_out) as f64 / 2.0)
            }
            ParamKind::CrossScale { channels } => Some(channels as f64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Report group, e.g. `stem`, `s3`, `noun`, `cross`.
    pub group: String,
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable<T: Element> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> Default for ParamTable<T> {
    fn default() -> Self {
        ParamTable { entries: IndexMap::new() }
    }
}

impl<T: Element> ParamTable<T> {
    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind, group: &str) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::spec(name, "duplicate parameter name"));
        }
        let (index, _) = self.entries.insert_full(
            name,
            Param {
                value,
                kind,
                group: group.to_string(),
            },
        );
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn at(&self, index: usize) -> (&str, &Param<T>) {
        let (k, v) = self.entries.get_index(index).expect("parameter index");
        (k, v)
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Param<T> {
        self.entries.get_index_mut(index).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total learnable scalars.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Scalars per group, in first-seen order.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: IndexMap<&str, usize> = IndexMap::new();
        for p in self.entries.values() {
            *groups.entry(p.group.as_str()).or_insert(0) += p.value.numel();
        }
        groups.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NormSlot {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockSlot {
    conv: [usize; 3],
    norm: [NormSlot; 2],
    last_norm: Option<NormSlot>,
    stride: usize,
    proj: Option<(usize, NormSlot)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CrossSlot {
    Zero,
    Identity,
    Scale(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LevelSlot {
    blocks: Vec<BlockSlot>,
    posts: Vec<NormSlot>,
    /// `[target][source]`.
    cross: Vec<Vec<CrossSlot>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BranchSlot {
    entry: BlockSlot,
    task_norms: Vec<NormSlot>,
    levels: Vec<LevelSlot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem_conv: usize,
    stem_norm: NormSlot,
    trunk: Vec<BlockSlot>,
    branch: Option<BranchSlot>,
    heads: Vec<(usize, usize)>,
}

/// The output of one forward evaluation.
pub struct Forward {
    /// Per-head logits `[N, K]`, in head order.
    pub logits: Vec<Var>,
    /// Tape leaf of every parameter, in table order.
    pub params: Vec<Var>,
}

/// An instantiated network: parameters, running statistics and wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element> {
    spec: ArchSpec,
    variant: Variant,
    params: ParamTable<T>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    layout: Layout,
}

struct Builder<T: Element> {
    params: ParamTable<T>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Element> Builder<T> {
    fn conv(&mut self, name: String, cout: usize, cin: usize, k: usize, group: &str) -> Result<usize> {
        let kind = ParamKind::Conv {
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        };
        self.params.add(name, Tensor::zeros([cout, cin, k, k]), kind, group)
    }

    fn norm(&mut self, prefix: String, c: usize, group: &str) -> Result<NormSlot> {
        let gamma = self
            .params
            .add(format!("{prefix}.gamma"), Tensor::ones([c]), ParamKind::NormGamma, group)?;
        let beta = self
            .params
            .add(format!("{prefix}.beta"), Tensor::zeros([c]), ParamKind::NormBeta, group)?;
        self.stat_names.push(prefix);
        self.stats.push(RunningStats::new(c));
        Ok(NormSlot {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        })
    }

    fn block(&mut self, prefix: &str, cin: usize, st: &Stage, stride: usize, last_norm: bool, group: &str) -> Result<BlockSlot> {
        let conv = [
            self.conv(format!("{prefix}.conv1.weight"), st.mid, cin, 1, group)?,
            self.conv(format!("{prefix}.conv2.weight"), st.mid, st.mid, 3, group)?,
            self.conv(format!("{prefix}.conv3.weight"), st.out, st.mid, 1, group)?,
        ];
        let norm = [
            self.norm(format!("{prefix}.bn1"), st.mid, group)?,
            self.norm(format!("{prefix}.bn2"), st.mid, group)?,
        ];
        let last_norm = if last_norm {
            Some(self.norm(format!("{prefix}.bn3"), st.out, group)?)
        } else {
            None
        };
        let proj = if Shortcut::needs_projection(cin, st.out, stride) {
            let w = self.conv(format!("{prefix}.proj.weight"), st.out, cin, 1, group)?;
            Some((w, self.norm(format!("{prefix}.proj_bn"), st.out, group)?))
        } else {
            None
        };
        Ok(BlockSlot {
            conv,
            norm,
            last_norm,
            stride,
            proj,
        })
    }
}

fn block_name(stage: usize, block: usize) -> String {
    format!("s{}.b{}", stage + 1, block + 1)
}

impl<T: Element> Network<T> {
    /// Builds the network with zero weights, unit BN scales and zero biases;
    /// call [`he_init`] for the random initialization.
    pub fn build(spec: &ArchSpec, variant: Variant) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: ParamTable::default(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        };
        let stem_conv = b.conv("stem.conv.weight".into(), spec.stem.channels, spec.in_channels, spec.stem.kernel, "stem")?;
        let stem_norm = b.norm("stem.bn".into(), spec.stem.channels, "stem")?;
        let mut trunk = Vec::new();
        let mut branch = None;
        let mut cin = spec.stem.channels;
        'stages: for (si, st) in spec.stages.iter().enumerate() {
            let group = format!("s{}", si + 1);
            for bi in 0..st.blocks {
                let stride = if bi == 0 { st.stride } else { 1 };
                let name = block_name(si, bi);
                let is_entry = spec.branch == Some(BranchPoint { stage: si, block: bi });
                let slot = b.block(&name, cin, st, stride, !is_entry, &group)?;
                cin = st.out;
                if is_entry {
                    branch = Some(Self::build_branch(&mut b, spec, variant, slot)?);
                    break 'stages;
                }
                trunk.push(slot);
            }
        }
        let mut heads = Vec::new();
        let features = spec.final_channels();
        for h in &spec.heads {
            let w = b.params.add(
                format!("{}.fc.weight", h.name),
                Tensor::zeros([h.classes, features]),
                ParamKind::FcWeight {
                    fan_in: features,
                    fan_out: h.classes,
                },
                &h.name,
            )?;
            let bias = b
                .params
                .add(format!("{}.fc.bias", h.name), Tensor::zeros([h.classes]), ParamKind::FcBias, &h.name)?;
            heads.push((w, bias));
        }
        Ok(Network {
            spec: spec.clone(),
            variant,
            params: b.params,
            stat_names: b.stat_names,
            stats: b.stats,
            layout: Layout {
                stem_conv,
                stem_norm,
                trunk,
                branch,
                heads,
            },
        })
    }

    fn build_branch(b: &mut Builder<T>, spec: &ArchSpec, variant: Variant, entry: BlockSlot) -> Result<BranchSlot> {
        let bp = spec.branch.expect("branch point");
        let st = spec.stages[bp.stage];
        let tasks = spec.heads.len();
        let mut task_norms = Vec::new();
        for h in &spec.heads {
            task_norms.push(b.norm(format!("{}.branch_bn", h.name), st.out, &h.name)?);
        }
        let mut levels = Vec::new();
        for level in 0..spec.task_blocks() {
            let bi = bp.block + 1 + level;
            let name = block_name(bp.stage, bi);
            let mut blocks = Vec::new();
            let mut posts = Vec::new();
            for h in &spec.heads {
                let prefix = format!("{}.{name}", h.name);
                blocks.push(b.block(&prefix, st.out, &st, 1, false, &h.name)?);
                posts.push(b.norm(format!("{prefix}.post_bn"), st.out, &h.name)?);
            }
            let crossed = level < spec.cross_layers;
            let mut cross = Vec::new();
            for t in 0..tasks {
                let mut row = Vec::new();
                for j in 0..tasks {
                    row.push(if j == t {
                        CrossSlot::Identity
                    } else if !crossed {
                        CrossSlot::Zero
                    } else {
                        match variant {
                            Variant::X0 => CrossSlot::Zero,
                            Variant::XI => CrossSlot::Identity,
                            Variant::Xs => CrossSlot::Scale(b.params.add(
                                format!("cross.{name}.{}-{}.scale", spec.heads[j].name, spec.heads[t].name),
                                Tensor::ones([st.out]),
                                ParamKind::CrossScale { channels: st.out },
                                "cross",
                            )?),
                        }
                    });
                }
                cross.push(row);
            }
            levels.push(LevelSlot { blocks, posts, cross });
        }
        Ok(BranchSlot {
            entry,
            task_norms,
            levels,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamTable<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable<T> {
        &mut self.params
    }

    /// Running statistics with their layer names (`<layer>` of `<layer>.gamma`).
    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn running_stats_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.stat_names.iter().map(String::as_str).zip(self.stats.iter_mut())
    }

    pub fn num_tasks(&self) -> usize {
        self.spec.heads.len()
    }

    /// Copies every parameter and running statistic whose name and shape
    /// match one in `other`; returns how many tensors were copied.
    pub fn copy_matching(&mut self, other: &Network<T>) -> usize {
        let mut copied = 0;
        for (name, p) in self.params.iter_mut() {
            if let Some(o) = other.params.get(name) {
                if o.value.shape() == p.value.shape() {
                    p.value = o.value.clone();
                    copied += 1;
                }
            }
        }
        for (name, s) in self.stat_names.iter().zip(self.stats.iter_mut()) {
            if let Some((_, o)) = other.running_stats().find(|(n, _)| n == name) {
                if o.channels() == s.channels() {
                    *s = o.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Converts the element type of every tensor.
    pub fn cast<U: Element>(&self) -> Network<U> {
        let mut params = ParamTable::default();
        for (name, p) in self.params.iter() {
            params
                .add(name, p.value.cast(), p.kind, &p.group)
                .expect("names are unique");
        }
        Network {
            spec: self.spec.clone(),
            variant: self.variant,
            params,
            stat_names: self.stat_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Convolutions and fully connected layers on each head's main path,
    /// shortcut projections excluded: `(convs, fcs)` per head.
    pub fn path_depths(&self) -> Vec<(usize, usize)> {
        let trunk = 1 + 3 * self.layout.trunk.len() + self.layout.branch.as_ref().map_or(0, |_| 3);
        let task = self.layout.branch.as_ref().map_or(0, |b| 3 * b.levels.len());
        vec![(trunk + task, 1); self.layout.heads.len()]
    }

    /// Evaluates every head on `images` `[N, C, H, W]`. In training mode
    /// batch norm uses batch statistics and updates the running estimates.
    pub fn forward(&mut self, g: &mut Graph<T>, images: Tensor<T>, train: bool) -> Result<Forward> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, H, W] images, got {shape:?}", self.spec.in_channels),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|(_, p)| g.param(p.value.clone())).collect();
        let x = g.constant(images);
        let layout = &self.layout;
        let mut pass = Pass::new(g, &mut self.stats, train);
        let norm = |n: NormSlot| NormParams {
            gamma: vars[n.gamma],
            beta: vars[n.beta],
            stats: n.stats,
        };
        let stack = |b: &BlockSlot| {
            ConvStack::bottleneck(
                [vars[b.conv[0]], vars[b.conv[1]], vars[b.conv[2]]],
                [norm(b.norm[0]), norm(b.norm[1])],
                b.last_norm.map(norm),
                b.stride,
            )
        };
        let shortcut = |b: &BlockSlot| match b.proj {
            Some((w, n)) => Shortcut::Projection(Projection {
                weight: vars[w],
                stride: b.stride,
                norm: Some(norm(n)),
            }),
            None => Shortcut::Identity,
        };

        let stem = &self.spec.stem;
        let mut h = pass.graph.conv2d(x, vars[layout.stem_conv], stem.stride, stem.pad)?;
        h = pass.norm(h, &norm(layout.stem_norm))?;
        h = pass.graph.relu(h)?;
        if let Some(p) = stem.pool {
            h = pass.graph.maxpool(h, p.kernel, p.stride, p.pad)?;
        }
        for b in &layout.trunk {
            let p = ResidualBlockParams {
                path: stack(b),
                shortcut: shortcut(b),
                post: PostActivation::Relu,
            };
            h = residual_block(&mut pass, h, &p)?;
        }
        let features = match &layout.branch {
            None => vec![h; layout.heads.len()],
            Some(br) => {
                let p = ResidualBlockParams {
                    path: stack(&br.entry),
                    shortcut: shortcut(&br.entry),
                    post: PostActivation::None,
                };
                let sum = residual_block(&mut pass, h, &p)?;
                let mut xs = Vec::with_capacity(br.task_norms.len());
                for &n in &br.task_norms {
                    let y = pass.norm(sum, &norm(n))?;
                    xs.push(pass.graph.relu(y)?);
                }
                for level in &br.levels {
                    let p = CrossResidualBlockParams {
                        paths: level.blocks.iter().map(stack).collect(),
                        posts: level.posts.iter().map(|&n| PostActivation::NormRelu(norm(n))).collect(),
                        weights: level
                            .cross
                            .iter()
                            .map(|row| {
                                row.iter()
                                    .map(|c| match *c {
                                        CrossSlot::Zero => CrossWeight::Zero,
                                        CrossSlot::Identity => CrossWeight::Identity,
                                        CrossSlot::Scale(i) => CrossWeight::ChannelScale(vars[i]),
                                    })
                                    .collect()
                            })
                            .collect(),
                    };
                    xs = cross_residual_block(&mut pass, &xs, &p)?;
                }
                xs
            }
        };
        let mut logits = Vec::with_capacity(layout.heads.len());
        for (&f, &(w, b)) in features.iter().zip(&layout.heads) {
            let pooled = pass.graph.global_avgpool(f)?;
            logits.push(pass.graph.linear(pooled, vars[w], Some(vars[b]))?);
        }
        Ok(Forward { logits, params: vars })
    }

    /// `(layer, source, target, scale)` for every channel-scale cross entry.
    pub fn cross_scales(&self) -> Vec<(String, String, String, &Tensor<T>)> {
        let mut out = Vec::new();
        let Some(br) = &self.layout.branch else {
            return out;
        };
        let bp = self.spec.branch.expect("branch point");
        for (level, slot) in br.levels.iter().enumerate() {
            let layer = block_name(bp.stage, bp.block + 1 + level);
            for (t, row) in slot.cross.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    if let CrossSlot::Scale(i) = *c {
                        out.push((
                            layer.clone(),
                            self.spec.heads[j].name.clone(),
                            self.spec.heads[t].name.clone(),
                            &self.params.at(i).1.value,
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Canonical network with one head.
pub fn build_single_task<T: Element>(spec: &ArchSpec) -> Result<Network<T>> {
    if spec.heads.len() != 1 {
        return Err(Error::spec("arch.heads", format!("single-task build needs one head, got {}", spec.heads.len())));
    }
    Network::build(spec, Variant::X0)
}

/// Branched network with one head per task.
pub fn build_multitask<T: Element>(spec: &ArchSpec, variant: Variant) -> Result<Network<T>> {
    if spec.heads.len() < 2 {
        return Err(Error::spec("arch.heads", "multitask build needs at least two heads"));
    }
    if spec.branch.is_none() {
        return Err(Error::spec("arch.branch", "multitask build needs a branch point"));
    }
    Network::build(spec, variant)
}

/// Desk-scale network; any head count, 32×32 input.
pub fn build_mini<T: Element>(spec: &ArchSpec, variant: Variant) -> Result<Network<T>> {
    if spec.input_size != 32 {
        return Err(Error::spec("arch.input_size", format!("mini networks take 32×32 input, got {}", spec.input_size)));
    }
    Network::build(spec, variant)
}

pub fn count_params<T: Element>(net: &Network<T>) -> usize {
    net.params().count()
}

/// Draws every Gaussian-initialized parameter from `N(0, 2/n_l)`, one
/// ChaCha stream per parameter index, and resets the rest (BN scales to
/// one; BN shifts and biases to zero) along with the running statistics.
pub fn he_init<T: Element>(net: &mut Network<T>, seed: u64) {
    he_init_params(&mut net.params, seed);
    for s in &mut net.stats {
        *s = RunningStats::new(s.channels());
    }
}

/// The parameter half of [`he_init`].
pub fn he_init_params<T: Element>(params: &mut ParamTable<T>, seed: u64) {
    for (index, (_, p)) in params.iter_mut().enumerate() {
        match p.kind.init_units() {
            Some(units) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let normal = Normal::new(0.0, (2.0 / units).sqrt()).expect("finite std");
                for v in p.value.data_mut() {
                    *v = T::of(normal.sample(&mut rng));
                }
            }
            None => {
                let fill = if p.kind == ParamKind::NormGamma { T::one() } else { T::zero() };
                p.value.data_mut().iter_mut().for_each(|v| *v = fill);
            }
        }
    }
}
