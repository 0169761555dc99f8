//! Declarative ResNet / BoTNet / BoTNet-S1 / SENet backbones.
//!
//! An [`ArchSpec`] is fully elaborated: every block carries its channel
//! widths, stride and (for BoT blocks) the attention config sized to the
//! featuremap it will see at `input_res`. The compact JSON form
//! ([`ArchDoc`]) is rebuilt into an `ArchSpec` through [`build_backbone`].

use serde::{Deserialize, Serialize};

use crate::attention::{MhsaConfig, PosMode, DEFAULT_HEADS};
use crate::blocks::{block_in, BlockKind, BlockParams, BlockSpec, BnParams, DEFAULT_SE_RATIO, BN_EPS};
use crate::error::{Error, Result};
use crate::graph::{Ctx, Eager};
use crate::io::ParamArchive;
use crate::ops::{conv_out_extent, Activation};
use crate::rng::ParamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STAGES: [&str; 4] = ["c2", "c3", "c4", "c5"];
const BASE_MID: [usize; 4] = [64, 128, 256, 512];
const STEM_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet,
    Botnet,
    BotnetS1,
    Senet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet => "resnet",
            Family::Botnet => "botnet",
            Family::BotnetS1 => "botnet_s1",
            Family::Senet => "senet",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Family::Resnet => "R",
            Family::Botnet => "BoT",
            Family::BotnetS1 => "BoT-S1-",
            Family::Senet => "SE",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Family::Resnet),
            "botnet" => Ok(Family::Botnet),
            "botnet_s1" | "botnet-s1" => Ok(Family::BotnetS1),
            "senet" => Ok(Family::Senet),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }
}

/// Blocks per group (c2..c5) for a named depth.
pub fn named_blockgroups(family: Family, name: &str) -> Result<[usize; 4]> {
    let key = name.trim_start_matches("S1-");
    let groups = match (family, key) {
        (_, "50") => [3, 4, 6, 3],
        (_, "101") => [3, 4, 23, 3],
        (_, "152") => [3, 8, 36, 3],
        (Family::Resnet | Family::Botnet | Family::Senet, "200") => [3, 24, 36, 3],
        (Family::BotnetS1, "59") => [3, 4, 6, 6],
        (Family::BotnetS1, "77") => [3, 4, 6, 12],
        (Family::BotnetS1, "110") => [3, 4, 23, 6],
        (Family::BotnetS1, "128") => [3, 4, 23, 12],
        (Family::Senet, "350") => [4, 40, 60, 12],
        _ => {
            return Err(Error::Config(format!(
                "unknown depth {name:?} for family {}",
                family.name()
            )))
        }
    };
    Ok(groups)
}

/// Which c5 blocks use MHSA, and where Non-Local blocks are inserted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ReplacementConfig {
    pub flags: Vec<bool>,
    /// (group number 2..=5, insertion index within the group's original blocks)
    pub nl_insertions: Vec<(usize, usize)>,
}

impl ReplacementConfig {
    pub fn all(n: usize, on: bool) -> Self {
        Self {
            flags: vec![on; n],
            nl_insertions: Vec::new(),
        }
    }

    /// Parses "1,0,1" or "[1,0,1]".
    pub fn parse_flags(s: &str) -> Result<Vec<bool>> {
        s.trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(|f| match f.trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(Error::Config(format!("bad replacement flag {other:?}"))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HeadSpec {
    pub in_features: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub name: String,
    pub family: Family,
    /// Blocks per group before any insertion.
    pub depths: [usize; 4],
    pub stem: StemSpec,
    pub groups: Vec<Vec<BlockSpec>>,
    pub replacement: ReplacementConfig,
    pub head: Option<HeadSpec>,
    pub input_res: (usize, usize),
    pub activation: Activation,
    pub se_ratio: Option<usize>,
    pub heads: usize,
    pub pos_mode: PosMode,
    pub width_divisor: usize,
}

impl ArchSpec {
    /// Equality ignoring name and family.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.stem == other.stem
            && self.groups == other.groups
            && self.head == other.head
            && self.input_res == other.input_res
    }

    pub fn block_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn attention_configs(&self) -> impl Iterator<Item = &MhsaConfig> {
        self.groups.iter().flatten().filter_map(|b| b.attention.as_ref())
    }

    pub fn to_doc(&self) -> ArchDoc {
        ArchDoc {
            name: self.name.clone(),
            family: self.family,
            blockgroups: self.depths.to_vec(),
            replacement_flags: self.replacement.flags.iter().map(|&f| f as u8).collect(),
            input_res: [self.input_res.0, self.input_res.1],
            n_classes: self.head.as_ref().map(|h| h.n_classes),
            activation: self.activation,
            se_ratio: self.se_ratio,
            heads: Some(self.heads),
            pos_mode: Some(self.pos_mode),
            width_divisor: (self.width_divisor != 1).then_some(self.width_divisor),
            nl_insertions: (!self.replacement.nl_insertions.is_empty())
                .then(|| self.replacement.nl_insertions.clone()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ArchDoc = serde_json::from_str(s)?;
        doc.build()
    }
}

/// Compact JSON description of an architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDoc {
    pub name: String,
    pub family: Family,
    pub blockgroups: Vec<usize>,
    pub replacement_flags: Vec<u8>,
    pub input_res: [usize; 2],
    pub n_classes: Option<usize>,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_ratio: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_mode: Option<PosMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_divisor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl_insertions: Option<Vec<(usize, usize)>>,
}

impl ArchDoc {
    pub fn build(&self) -> Result<ArchSpec> {
        let groups: [usize; 4] = self.blockgroups.as_slice().try_into().map_err(|_| {
            Error::Config(format!("blockgroups needs 4 entries, got {}", self.blockgroups.len()))
        })?;
        let flags = self
            .replacement_flags
            .iter()
            .map(|&f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Config(format!("replacement flag must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = BuildOptions {
            blockgroups: Some(groups),
            replacement: Some(flags),
            nl_insertions: self.nl_insertions.clone().unwrap_or_default(),
            input_res: (self.input_res[0], self.input_res[1]),
            n_classes: self.n_classes,
            activation: self.activation,
            se_ratio: self.se_ratio,
            heads: self.heads.unwrap_or(DEFAULT_HEADS),
            pos_mode: self.pos_mode.unwrap_or_default(),
            width_divisor: self.width_divisor.unwrap_or(1),
        };
        let mut arch = build_backbone(self.family, "custom", &opts)?;
        arch.name = self.name.clone();
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Overrides the named depth.
    pub blockgroups: Option<[usize; 4]>,
    /// c5 flags; defaults to all-ones for BoT families and all-zeros otherwise.
    pub replacement: Option<Vec<bool>>,
    pub nl_insertions: Vec<(usize, usize)>,
    pub input_res: (usize, usize),
    /// None builds a headless backbone.
    pub n_classes: Option<usize>,
    pub activation: Activation,
    /// SE ratio for conv bottlenecks; SENet defaults to 16.
    pub se_ratio: Option<usize>,
    pub heads: usize,
    pub pos_mode: PosMode,
    /// Divides every channel width (reduced-width smoke variants).
    pub width_divisor: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            blockgroups: None,
            replacement: None,
            nl_insertions: Vec::new(),
            input_res: (224, 224),
            n_classes: Some(1000),
            activation: Activation::Relu,
            se_ratio: None,
            heads: DEFAULT_HEADS,
            pos_mode: PosMode::Relative,
            width_divisor: 1,
        }
    }
}

impl BuildOptions {
    pub fn at(res: usize) -> Self {
        Self {
            input_res: (res, res),
            ..Self::default()
        }
    }
}

fn check_res(res: (usize, usize)) -> Result<()> {
    if res.0 == 0 || res.1 == 0 || res.0 % 32 != 0 || res.1 % 32 != 0 {
        return Err(Error::Config(format!(
            "input resolution {}x{} must be a positive multiple of 32",
            res.0, res.1
        )));
    }
    Ok(())
}

/// Elaborates a backbone description.
pub fn build_backbone(family: Family, depth_or_name: &str, opts: &BuildOptions) -> Result<ArchSpec> {
    check_res(opts.input_res)?;
    let depths = match opts.blockgroups {
        Some(g) => g,
        None => named_blockgroups(family, depth_or_name)?,
    };
    if depths.iter().any(|&d| d == 0) {
        return Err(Error::Config("every blockgroup needs at least one block".into()));
    }
    let div = opts.width_divisor;
    if div == 0 || STEM_WIDTH % div != 0 {
        return Err(Error::Config(format!("width divisor {div} must divide {STEM_WIDTH}")));
    }
    let n5 = depths[3];
    let attn_family = matches!(family, Family::Botnet | Family::BotnetS1);
    let flags = match &opts.replacement {
        Some(f) => f.clone(),
        None => vec![attn_family; n5],
    };
    if flags.len() != n5 {
        return Err(Error::Config(format!(
            "replacement config has {} flags but c5 has {n5} blocks",
            flags.len()
        )));
    }
    if !attn_family && flags.iter().any(|&f| f) {
        return Err(Error::Config(format!(
            "family {} cannot replace blocks with attention",
            family.name()
        )));
    }
    if family == Family::BotnetS1 && !flags.iter().all(|&f| f) {
        return Err(Error::Config("BoTNet-S1 requires every c5 block to be replaced".into()));
    }
    let se_ratio = match (family, opts.se_ratio) {
        (Family::Senet, None) => Some(DEFAULT_SE_RATIO),
        (_, r) => r,
    };

    let (res_h, res_w) = opts.input_res;
    let stem_out = STEM_WIDTH / div;
    let mut groups = Vec::with_capacity(4);
    let mut in_ch = stem_out;
    // featuremap entering c2
    let (mut fh, mut fw) = (res_h / 4, res_w / 4);
    for (g, &depth) in depths.iter().enumerate() {
        let mid = BASE_MID[g] / div;
        let mut blocks = Vec::with_capacity(depth + 1);
        for i in 0..depth {
            let stride = match (g, i) {
                (1 | 2, 0) => 2,
                (3, 0) if family != Family::BotnetS1 => 2,
                _ => 1,
            };
            let block = if g == 3 && flags[i] {
                let cfg = MhsaConfig::new(mid, opts.heads, fh, fw, opts.pos_mode)?;
                BlockSpec::bot(in_ch, mid, stride, cfg, opts.activation)
            } else {
                let b = BlockSpec::conv_bottleneck(in_ch, mid, stride, opts.activation);
                match se_ratio {
                    Some(r) => b.with_se(r),
                    None => b,
                }
            };
            if stride == 2 {
                fh /= 2;
                fw /= 2;
            }
            in_ch = block.out_channels;
            blocks.push(block);
        }
        groups.push(blocks);
    }

    let mut inserts = opts.nl_insertions.clone();
    inserts.sort_by(|a, b| b.cmp(a));
    for &(group, pos) in &inserts {
        if !(2..=5).contains(&group) {
            return Err(Error::Config(format!("NL insertion group must be 2..=5, got {group}")));
        }
        let blocks = &mut groups[group - 2];
        if pos == 0 || pos > blocks.len() {
            return Err(Error::Config(format!(
                "NL insertion position {pos} outside 1..={} in c{group}",
                blocks.len()
            )));
        }
        let channels = blocks[pos - 1].out_channels;
        blocks.insert(pos, BlockSpec::nl_insert(channels));
    }

    let name = match depth_or_name.trim_start_matches("S1-") {
        "custom" => format!("{}custom", family.prefix()),
        d => format!("{}{d}", family.prefix()),
    };
    let arch = ArchSpec {
        name,
        family,
        depths,
        stem: StemSpec {
            in_channels: 3,
            out_channels: stem_out,
            kernel: 7,
            stride: 2,
            pad: 3,
        },
        groups,
        replacement: ReplacementConfig {
            flags,
            nl_insertions: opts.nl_insertions.clone(),
        },
        head: opts.n_classes.map(|n| HeadSpec {
            in_features: in_ch,
            n_classes: n,
        }),
        input_res: opts.input_res,
        activation: opts.activation,
        se_ratio,
        heads: opts.heads,
        pos_mode: opts.pos_mode,
        width_divisor: div,
    };
    for b in arch.groups.iter().flatten() {
        b.validate()?;
    }
    Ok(arch)
}

/// Default NL insertion point: between the pre-final and final block of a group.
pub fn default_nl_position(arch_depths: &[usize; 4], group: usize) -> usize {
    arch_depths[group - 2] - 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub stage: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Output shape of each stage (c1 = stem convolution, c2..c5 = groups)
/// without allocating any featuremap.
pub fn stage_shapes(arch: &ArchSpec, res: (usize, usize)) -> Result<Vec<StageShape>> {
    check_res(res)?;
    let s = &arch.stem;
    let mut h = conv_out_extent(res.0, s.kernel, s.stride, s.pad, "stem")?;
    let mut w = conv_out_extent(res.1, s.kernel, s.stride, s.pad, "stem")?;
    let mut out = vec![StageShape {
        stage: "c1".into(),
        h,
        w,
        c: s.out_channels,
    }];
    h = conv_out_extent(h, 3, 2, 1, "max_pool")?;
    w = conv_out_extent(w, 3, 2, 1, "max_pool")?;
    let mut c = s.out_channels;
    for (g, blocks) in arch.groups.iter().enumerate() {
        for b in blocks {
            h = b.out_extent(h);
            w = b.out_extent(w);
            c = b.out_channels;
        }
        out.push(StageShape {
            stage: STAGES[g].into(),
            h,
            w,
            c,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<V> {
    pub stem_w: V,
    pub stem_bn: BnParams<V>,
    pub groups: Vec<Vec<BlockParams<V>>>,
    /// ([n_classes, in_features], [n_classes])
    pub fc: Option<(V, V)>,
}

impl<V> ModelParams<V> {
    pub fn map_named<U>(&self, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<ModelParams<U>> {
        let stem_w = f("stem.conv.w", &self.stem_w)?;
        let stem_bn = self.stem_bn.map_named("stem.bn.", f)?;
        let mut groups = Vec::with_capacity(self.groups.len());
        for (g, blocks) in self.groups.iter().enumerate() {
            let mut out = Vec::with_capacity(blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                out.push(b.map_named(&format!("{}.{i}.", STAGES[g]), f)?);
            }
            groups.push(out);
        }
        let fc = match &self.fc {
            Some((w, b)) => Some((f("head.fc.w", w)?, f("head.fc.b", b)?)),
            None => None,
        };
        Ok(ModelParams {
            stem_w,
            stem_bn,
            groups,
            fc,
        })
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &V)) {
        self.map_named(&mut |n, v| {
            f(n, v);
            Ok(())
        })
        .expect("visitor is infallible");
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Seeded random parameters; the draw order is the record order.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ParamRng::new(seed);
        let s = &arch.stem;
        let fan = s.in_channels * s.kernel * s.kernel;
        let stem_w = rng.fan_in(&[s.out_channels, s.in_channels, s.kernel, s.kernel], fan);
        let stem_bn = BnParams::init(s.out_channels, &mut rng);
        let groups = arch
            .groups
            .iter()
            .map(|blocks| blocks.iter().map(|b| BlockParams::init(b, &mut rng)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let fc = arch.head.as_ref().map(|h| {
            (
                rng.fan_in(&[h.n_classes, h.in_features], h.in_features),
                rng.uniform(&[h.n_classes], -0.01, 0.01),
            )
        });
        Ok(Self {
            stem_w,
            stem_bn,
            groups,
            fc,
        })
    }

    pub fn to_archive(&self) -> ParamArchive<T> {
        let mut a = ParamArchive::new();
        self.visit(&mut |n, t| a.push(n, t.clone()));
        a
    }

    /// Loads records by name, using a freshly built parameter tree for `arch`
    /// as the template for names and shapes.
    pub fn from_archive(arch: &ArchSpec, archive: &ParamArchive<T>) -> Result<Self> {
        let template = Self::init(arch, 0)?;
        template.map_named(&mut |name, t| {
            let got = archive.take(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Parameter(format!(
                    "record {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            Ok(got)
        })
    }

    pub fn trainable_numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if crate::blocks::is_trainable(name) {
                n += t.numel();
            }
        });
        n
    }
}

/// Logits plus the featuremap shape observed at the end of every stage.
#[derive(Clone, Debug)]
pub struct ForwardOutput<V> {
    pub logits: V,
    pub stages: Vec<StageShape>,
}

/// stem -> c2..c5 -> global average pool -> fully connected (no softmax).
/// Headless architectures return the c5 featuremap.
pub fn forward_in<T: Scalar, C: Ctx<T>>(
    ctx: &mut C,
    arch: &ArchSpec,
    params: &ModelParams<C::V>,
    x: &C::V,
) -> Result<ForwardOutput<C::V>> {
    let shape = ctx.shape(x).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::shape("forward", format!("expected NCHW input, got {shape:?}")));
    };
    if (h, w) != arch.input_res {
        return Err(Error::Resolution {
            want_h: arch.input_res.0,
            want_w: arch.input_res.1,
            got_h: h,
            got_w: w,
        });
    }
    if c != arch.stem.in_channels {
        return Err(Error::Config(format!(
            "expected {} input channels, got {c}",
            arch.stem.in_channels
        )));
    }
    let observe = |ctx: &C, v: &C::V, stage: &str| {
        let s = ctx.shape(v);
        StageShape {
            stage: stage.into(),
            h: s[2],
            w: s[3],
            c: s[1],
        }
    };
    let mut stages = Vec::with_capacity(5);
    ctx.set_stage("c1");
    let s = &arch.stem;
    let y = ctx.conv2d(x, &params.stem_w, s.stride, s.pad)?;
    let bn = &params.stem_bn;
    let y = ctx.batchnorm(&y, &bn.gamma, &bn.beta, &bn.mean, &bn.var, BN_EPS)?;
    let mut y = ctx.act(&y, arch.activation)?;
    stages.push(observe(ctx, &y, "c1"));
    ctx.set_stage("c2");
    y = ctx.max_pool2d(&y, 3, 2, 1)?;
    for (g, (specs, ps)) in arch.groups.iter().zip(&params.groups).enumerate() {
        ctx.set_stage(STAGES[g]);
        for (spec, p) in specs.iter().zip(ps) {
            y = block_in(ctx, &y, spec, p)?;
        }
        stages.push(observe(ctx, &y, STAGES[g]));
    }
    let logits = match &params.fc {
        Some((fw, fb)) => {
            ctx.set_stage("head");
            let pooled = ctx.global_avg_pool(&y)?;
            let wt = ctx.permute(fw, &[1, 0])?;
            let z = ctx.matmul(&pooled, &wt)?;
            ctx.add_bias(&z, fb)?
        }
        None => y,
    };
    Ok(ForwardOutput { logits, stages })
}

pub fn forward_classifier<T: Scalar>(
    arch: &ArchSpec,
    params: &ModelParams<Tensor<T>>,
    x: &Tensor<T>,
) -> Result<ForwardOutput<Tensor<T>>> {
    forward_in(&mut Eager::new(), arch, params, x)
}

/// Labels for the describe table ("3 x conv3x3", "MHSA, conv3x3 x 2", ...).
pub fn group_summary(blocks: &[BlockSpec]) -> String {
    let mut parts: Vec<(BlockKind, usize)> = Vec::new();
    for b in blocks {
        match parts.last_mut() {
            Some((k, n)) if *k == b.kind => *n += 1,
            _ => parts.push((b.kind, 1)),
        }
    }
    parts
        .iter()
        .map(|(k, n)| format!("{n}x{}", k.label()))
        .collect::<Vec<_>>()
        .join(" + ")
}
