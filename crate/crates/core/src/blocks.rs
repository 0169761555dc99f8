//! Residual blocks: convolutional bottleneck, BoT (MHSA in place of the
//! spatial 3x3), strided BoT, Non-Local insertion, and the SE gate.
//!
//! Every bottleneck layer is followed by BatchNorm; the first two also by
//! the activation, and the third activation is applied after the residual
//! sum. A strided BoT block downsamples with a 2x2/2 average pool right
//! after the MHSA layer and uses a strided 1x1 projection shortcut.

use serde::{Deserialize, Serialize};

use crate::attention::{mhsa2d_in, nonlocal_in, MhsaConfig, MhsaParams, NonLocalParams};
use crate::error::{Error, Result};
use crate::graph::{Ctx, Eager};
use crate::ops::Activation;
use crate::rng::ParamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_SE_RATIO: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBottleneck,
    Bot,
    NlInsert,
}

impl BlockKind {
    pub fn label(self) -> &'static str {
        match self {
            BlockKind::ConvBottleneck => "conv3x3",
            BlockKind::Bot => "MHSA",
            BlockKind::NlInsert => "NL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention: Option<MhsaConfig>,
    pub se_ratio: Option<usize>,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn conv_bottleneck(in_channels: usize, mid: usize, stride: usize, activation: Activation) -> Self {
        Self {
            kind: BlockKind::ConvBottleneck,
            in_channels,
            mid_channels: mid,
            out_channels: 4 * mid,
            stride,
            attention: None,
            se_ratio: None,
            activation,
        }
    }

    pub fn bot(in_channels: usize, mid: usize, stride: usize, attention: MhsaConfig, activation: Activation) -> Self {
        Self {
            kind: BlockKind::Bot,
            in_channels,
            mid_channels: mid,
            out_channels: 4 * mid,
            stride,
            attention: Some(attention),
            se_ratio: None,
            activation,
        }
    }

    pub fn nl_insert(channels: usize) -> Self {
        Self {
            kind: BlockKind::NlInsert,
            in_channels: channels,
            mid_channels: channels / 2,
            out_channels: channels,
            stride: 1,
            attention: None,
            se_ratio: None,
            activation: Activation::Relu,
        }
    }

    pub fn with_se(mut self, ratio: usize) -> Self {
        self.se_ratio = Some(ratio);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        match self.kind {
            BlockKind::ConvBottleneck | BlockKind::Bot => {
                if self.out_channels != 4 * self.mid_channels {
                    return Err(Error::Config(format!(
                        "bottleneck out_channels {} must be 4 x mid_channels {}",
                        self.out_channels, self.mid_channels
                    )));
                }
            }
            BlockKind::NlInsert => {
                if self.in_channels != self.out_channels
                    || self.stride != 1
                    || self.in_channels % 2 != 0
                    || self.mid_channels * 2 != self.in_channels
                {
                    return Err(Error::Config(
                        "non-local block must keep an even channel count at stride 1 with reduction 2".into(),
                    ));
                }
            }
        }
        match (self.kind, &self.attention) {
            (BlockKind::Bot, None) => return Err(Error::Config("BoT block needs an attention config".into())),
            (BlockKind::Bot, Some(a)) => {
                a.validate()?;
                if a.d_model != self.mid_channels {
                    return Err(Error::Config(format!(
                        "attention width {} must equal mid_channels {}",
                        a.d_model, self.mid_channels
                    )));
                }
            }
            (_, Some(_)) => return Err(Error::Config("only BoT blocks carry attention".into())),
            _ => {}
        }
        if self.se_ratio == Some(0) {
            return Err(Error::Config("SE ratio must be >= 1".into()));
        }
        if self.se_ratio.is_some() && self.kind != BlockKind::ConvBottleneck {
            return Err(Error::Config("SE gates attach only to convolutional bottlenecks".into()));
        }
        Ok(())
    }

    /// Whether the shortcut needs a 1x1 projection.
    pub fn has_projection(&self) -> bool {
        self.kind != BlockKind::NlInsert && (self.stride != 1 || self.in_channels != self.out_channels)
    }

    pub fn se_width(&self) -> Option<usize> {
        self.se_ratio.map(|r| se_width(self.out_channels, r))
    }

    /// Output spatial extent for an input extent.
    pub fn out_extent(&self, extent: usize) -> usize {
        match (self.kind, self.stride) {
            (_, 1) => extent,
            (BlockKind::Bot, _) => extent / 2,
            // 3x3, pad 1
            _ => (extent - 1) / self.stride + 1,
        }
    }
}

/// Reduced width of the SE bottleneck.
pub fn se_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// Inference-mode BatchNorm parameters; only gamma and beta are trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<V> {
    pub gamma: V,
    pub beta: V,
    pub mean: V,
    pub var: V,
}

impl<V> BnParams<V> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<BnParams<U>> {
        Ok(BnParams {
            gamma: f(&format!("{prefix}gamma"), &self.gamma)?,
            beta: f(&format!("{prefix}beta"), &self.beta)?,
            mean: f(&format!("{prefix}mean"), &self.mean)?,
            var: f(&format!("{prefix}var"), &self.var)?,
        })
    }
}

impl<T: Scalar> BnParams<Tensor<T>> {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            mean: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
        }
    }

    /// Random statistics around the identity transform.
    pub fn init(c: usize, rng: &mut ParamRng) -> Self {
        Self {
            gamma: rng.uniform(&[c], 0.8, 1.2),
            beta: rng.uniform(&[c], -0.1, 0.1),
            mean: rng.uniform(&[c], -0.1, 0.1),
            var: rng.uniform(&[c], 0.8, 1.2),
        }
    }
}

/// Squeeze-Excitation weights: `w1` [reduced, C], `w2` [C, reduced].
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams<V> {
    pub w1: V,
    pub w2: V,
}

impl<V> SeParams<V> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<SeParams<U>> {
        Ok(SeParams {
            w1: f(&format!("{prefix}w1"), &self.w1)?,
            w2: f(&format!("{prefix}w2"), &self.w2)?,
        })
    }
}

impl<T: Scalar> SeParams<Tensor<T>> {
    pub fn init(channels: usize, ratio: usize, rng: &mut ParamRng) -> Self {
        let r = se_width(channels, ratio);
        Self {
            w1: rng.fan_in(&[r, channels], channels),
            w2: rng.fan_in(&[channels, r], r),
        }
    }
}

/// The spatial layer of a bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub enum Middle<V> {
    /// [mid, mid, 3, 3]
    Conv(V),
    Mhsa(MhsaParams<V>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection<V> {
    /// [out, in, 1, 1]
    pub w: V,
    pub bn: BnParams<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams<V> {
    pub w1: V,
    pub bn1: BnParams<V>,
    pub middle: Middle<V>,
    pub bn2: BnParams<V>,
    pub w3: V,
    pub bn3: BnParams<V>,
    pub se: Option<SeParams<V>>,
    pub shortcut: Option<Projection<V>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams<V> {
    Bottleneck(BottleneckParams<V>),
    NonLocal(NonLocalParams<V>),
}

impl<V> BlockParams<V> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<BlockParams<U>> {
        Ok(match self {
            BlockParams::NonLocal(p) => BlockParams::NonLocal(p.map_named(&format!("{prefix}nl."), f)?),
            BlockParams::Bottleneck(p) => BlockParams::Bottleneck(BottleneckParams {
                w1: f(&format!("{prefix}conv1.w"), &p.w1)?,
                bn1: p.bn1.map_named(&format!("{prefix}bn1."), f)?,
                middle: match &p.middle {
                    Middle::Conv(w) => Middle::Conv(f(&format!("{prefix}conv2.w"), w)?),
                    Middle::Mhsa(m) => Middle::Mhsa(m.map_named(&format!("{prefix}mhsa."), f)?),
                },
                bn2: p.bn2.map_named(&format!("{prefix}bn2."), f)?,
                w3: f(&format!("{prefix}conv3.w"), &p.w3)?,
                bn3: p.bn3.map_named(&format!("{prefix}bn3."), f)?,
                se: p.se.as_ref().map(|s| s.map_named(&format!("{prefix}se."), f)).transpose()?,
                shortcut: p
                    .shortcut
                    .as_ref()
                    .map(|s| -> Result<Projection<U>> {
                        Ok(Projection {
                            w: f(&format!("{prefix}shortcut.w"), &s.w)?,
                            bn: s.bn.map_named(&format!("{prefix}shortcut.bn."), f)?,
                        })
                    })
                    .transpose()?,
            }),
        })
    }

    /// Visits every leaf with its record name.
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &V)) {
        self.map_named(prefix, &mut |name, v| {
            f(name, v);
            Ok(())
        })
        .expect("visitor is infallible");
    }
}

/// BatchNorm running statistics are inputs, not learned weights.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".mean") || name.ends_with(".var"))
}

impl<T: Scalar> BlockParams<Tensor<T>> {
    pub fn init(spec: &BlockSpec, rng: &mut ParamRng) -> Result<Self> {
        spec.validate()?;
        if spec.kind == BlockKind::NlInsert {
            return Ok(BlockParams::NonLocal(NonLocalParams::init(spec.in_channels, rng)?));
        }
        let (cin, mid, cout) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let w1 = rng.fan_in(&[mid, cin, 1, 1], cin);
        let bn1 = BnParams::init(mid, rng);
        let middle = match &spec.attention {
            Some(cfg) => Middle::Mhsa(MhsaParams::init(cfg, rng)),
            None => Middle::Conv(rng.fan_in(&[mid, mid, 3, 3], mid * 9)),
        };
        let bn2 = BnParams::init(mid, rng);
        let w3 = rng.fan_in(&[cout, mid, 1, 1], mid);
        let bn3 = BnParams::init(cout, rng);
        let se = spec.se_ratio.map(|r| SeParams::init(cout, r, rng));
        let shortcut = spec.has_projection().then(|| Projection {
            w: rng.fan_in(&[cout, cin, 1, 1], cin),
            bn: BnParams::init(cout, rng),
        });
        Ok(BlockParams::Bottleneck(BottleneckParams {
            w1,
            bn1,
            middle,
            bn2,
            w3,
            bn3,
            se,
            shortcut,
        }))
    }

    /// Trainable scalar count (BatchNorm statistics excluded).
    pub fn trainable_numel(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |name, t| {
            if is_trainable(name) {
                n += t.numel();
            }
        });
        n
    }
}

fn bn_in<T: Scalar, C: Ctx<T>>(ctx: &mut C, x: &C::V, bn: &BnParams<C::V>) -> Result<C::V> {
    ctx.batchnorm(x, &bn.gamma, &bn.beta, &bn.mean, &bn.var, BN_EPS)
}

fn linear_no_bias<T: Scalar, C: Ctx<T>>(ctx: &mut C, x: &C::V, w: &C::V) -> Result<C::V> {
    let wt = ctx.permute(w, &[1, 0])?;
    ctx.matmul(x, &wt)
}

/// `x * sigmoid(W2 act(W1 gap(x)))`, one gate per channel.
pub fn se_gate_in<T: Scalar, C: Ctx<T>>(
    ctx: &mut C,
    x: &C::V,
    params: &SeParams<C::V>,
    activation: Activation,
) -> Result<C::V> {
    let s = ctx.global_avg_pool(x)?;
    let z = linear_no_bias(ctx, &s, &params.w1)?;
    let z = ctx.act(&z, activation)?;
    let z = linear_no_bias(ctx, &z, &params.w2)?;
    let gate = ctx.sigmoid(&z)?;
    ctx.mul_channel(x, &gate)
}

/// Runs one block of any kind.
pub fn block_in<T: Scalar, C: Ctx<T>>(
    ctx: &mut C,
    x: &C::V,
    spec: &BlockSpec,
    params: &BlockParams<C::V>,
) -> Result<C::V> {
    let shape = ctx.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != spec.in_channels {
        return Err(Error::Config(format!(
            "block expects {} input channels, got shape {shape:?}",
            spec.in_channels
        )));
    }
    let p = match (spec.kind, params) {
        (BlockKind::NlInsert, BlockParams::NonLocal(p)) => return nonlocal_in(ctx, x, p),
        (BlockKind::ConvBottleneck | BlockKind::Bot, BlockParams::Bottleneck(p)) => p,
        _ => return Err(Error::Config("block parameters do not match block kind".into())),
    };
    let act = spec.activation;

    let h = ctx.conv2d(x, &p.w1, 1, 0)?;
    let h = bn_in(ctx, &h, &p.bn1)?;
    let h = ctx.act(&h, act)?;
    let h = match (&p.middle, &spec.attention) {
        (Middle::Conv(w), None) => ctx.conv2d(&h, w, spec.stride, 1)?,
        (Middle::Mhsa(m), Some(cfg)) => {
            let a = mhsa2d_in(ctx, &h, m, cfg)?;
            if spec.stride == 2 {
                ctx.avg_pool2d(&a)?
            } else {
                a
            }
        }
        _ => return Err(Error::Config("spatial layer does not match block kind".into())),
    };
    let h = bn_in(ctx, &h, &p.bn2)?;
    let h = ctx.act(&h, act)?;
    let h = ctx.conv2d(&h, &p.w3, 1, 0)?;
    let mut h = bn_in(ctx, &h, &p.bn3)?;
    if let Some(se) = &p.se {
        h = se_gate_in(ctx, &h, se, act)?;
    }
    let shortcut = match &p.shortcut {
        Some(proj) => {
            let s = ctx.conv2d(x, &proj.w, spec.stride, 0)?;
            bn_in(ctx, &s, &proj.bn)?
        }
        None => x.clone(),
    };
    let y = ctx.add(&h, &shortcut)?;
    ctx.act(&y, act)
}

pub fn bottleneck_block<T: Scalar>(x: &Tensor<T>, spec: &BlockSpec, params: &BlockParams<Tensor<T>>) -> Result<Tensor<T>> {
    if spec.kind != BlockKind::ConvBottleneck {
        return Err(Error::Config(format!("bottleneck_block given a {:?} spec", spec.kind)));
    }
    spec.validate()?;
    block_in(&mut Eager::new(), x, spec, params)
}

pub fn bot_block<T: Scalar>(x: &Tensor<T>, spec: &BlockSpec, params: &BlockParams<Tensor<T>>) -> Result<Tensor<T>> {
    if spec.kind != BlockKind::Bot {
        return Err(Error::Config(format!("bot_block given a {:?} spec", spec.kind)));
    }
    spec.validate()?;
    block_in(&mut Eager::new(), x, spec, params)
}

pub fn se_gate<T: Scalar>(x: &Tensor<T>, params: &SeParams<Tensor<T>>, activation: Activation) -> Result<Tensor<T>> {
    se_gate_in(&mut Eager::new(), x, params, activation)
}
