//! All-to-all multi-head self-attention over a 2D featuremap, and the
//! single-head Non-Local layer it is compared against.
//!
//! Per head the attention logits are the content-content term `q k^T` plus
//! a content-position term: `q r^T` with split relative embeddings
//! (`r = R_h[row offset] + R_w[col offset]`), `q p^T` with one absolute
//! embedding per key position, or nothing. Queries are scaled by
//! `d_head^(-1/2)` once, so the scale applies to both terms. There is no
//! output projection; the residual connection belongs to the enclosing block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Ctx, Eager, OpRecord};
use crate::rng::ParamRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;

/// Content-position term used in the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    #[default]
    Relative,
    Absolute,
    None,
}

impl std::str::FromStr for PosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(PosMode::Relative),
            "absolute" => Ok(PosMode::Absolute),
            "none" => Ok(PosMode::None),
            other => Err(Error::Config(format!("unknown position mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MhsaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub fm_h: usize,
    pub fm_w: usize,
    pub pos_mode: PosMode,
}

impl MhsaConfig {
    pub fn new(d_model: usize, heads: usize, fm_h: usize, fm_w: usize, pos_mode: PosMode) -> Result<Self> {
        let cfg = Self {
            d_model,
            heads,
            fm_h,
            fm_w,
            pos_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.fm_h == 0 || self.fm_w == 0 {
            return Err(Error::Config("featuremap extents must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn positions(&self) -> usize {
        self.fm_h * self.fm_w
    }

    pub fn logit_scale(&self) -> f64 {
        (self.d_head() as f64).powf(-0.5)
    }

    /// Shapes of the relative tables, [2H-1, d_head] and [2W-1, d_head].
    pub fn rel_table_shapes(&self) -> ([usize; 2], [usize; 2]) {
        (
            [2 * self.fm_h - 1, self.d_head()],
            [2 * self.fm_w - 1, self.d_head()],
        )
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::shape("mhsa2d", format!("expected NCHW, got {shape:?}")));
        };
        if c != self.d_model {
            return Err(Error::Config(format!(
                "mhsa2d expects {} channels, input has {c}",
                self.d_model
            )));
        }
        if (h, w) != (self.fm_h, self.fm_w) {
            return Err(Error::Resolution {
                want_h: self.fm_h,
                want_w: self.fm_w,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }
}

/// Split relative embeddings shared by all heads. Row `o + extent - 1`
/// holds the embedding for key-minus-query offset `o`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosTables<V> {
    pub r_h: V,
    pub r_w: V,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PosParams<V> {
    Relative(RelPosTables<V>),
    /// [fm_h * fm_w, d_head], one embedding per key position.
    Absolute(V),
    None,
}

/// Query/key/value projections (d_model x d_model, applied as 1x1
/// convolutions) plus position parameters. No output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams<V> {
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub pos: PosParams<V>,
}

impl<V> MhsaParams<V> {
    /// Rebuilds the tree with every leaf passed through `f` along with its
    /// stable record name (`wq`, `wk`, `wv`, `r_h`, `r_w`, `p_abs`).
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<MhsaParams<U>> {
        let name = |leaf: &str| format!("{prefix}{leaf}");
        Ok(MhsaParams {
            wq: f(&name("wq"), &self.wq)?,
            wk: f(&name("wk"), &self.wk)?,
            wv: f(&name("wv"), &self.wv)?,
            pos: match &self.pos {
                PosParams::Relative(t) => PosParams::Relative(RelPosTables {
                    r_h: f(&name("r_h"), &t.r_h)?,
                    r_w: f(&name("r_w"), &t.r_w)?,
                }),
                PosParams::Absolute(p) => PosParams::Absolute(f(&name("p_abs"), p)?),
                PosParams::None => PosParams::None,
            },
        })
    }
}

impl<T: Scalar> MhsaParams<Tensor<T>> {
    /// Random parameters: projections ~ N(0, 1/fan_in), position tables ~ N(0, 1/d_head).
    pub fn init(cfg: &MhsaConfig, rng: &mut ParamRng) -> Self {
        let d = cfg.d_model;
        let wq = rng.fan_in(&[d, d], d);
        let wk = rng.fan_in(&[d, d], d);
        let wv = rng.fan_in(&[d, d], d);
        let std = (cfg.d_head() as f64).powf(-0.5);
        let pos = match cfg.pos_mode {
            PosMode::Relative => {
                let (sh, sw) = cfg.rel_table_shapes();
                PosParams::Relative(RelPosTables {
                    r_h: rng.normal(&sh, std),
                    r_w: rng.normal(&sw, std),
                })
            }
            PosMode::Absolute => PosParams::Absolute(rng.normal(&[cfg.positions(), cfg.d_head()], std)),
            PosMode::None => PosParams::None,
        };
        Self { wq, wk, wv, pos }
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self, cfg: &MhsaConfig) -> Result<()> {
        let d = cfg.d_model;
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.shape() != [d, d] {
                return Err(Error::Config(format!("{name} has shape {:?}, expected [{d}, {d}]", w.shape())));
            }
        }
        match (&self.pos, cfg.pos_mode) {
            (PosParams::Relative(t), PosMode::Relative) => {
                let (sh, sw) = cfg.rel_table_shapes();
                if t.r_h.shape() != sh || t.r_w.shape() != sw {
                    return Err(Error::Config(format!(
                        "relative tables {:?}/{:?} do not match {}x{} featuremap (need {sh:?}/{sw:?})",
                        t.r_h.shape(),
                        t.r_w.shape(),
                        cfg.fm_h,
                        cfg.fm_w
                    )));
                }
            }
            (PosParams::Absolute(p), PosMode::Absolute) => {
                if p.shape() != [cfg.positions(), cfg.d_head()] {
                    return Err(Error::Config(format!(
                        "absolute table {:?} does not match {} positions x {}",
                        p.shape(),
                        cfg.positions(),
                        cfg.d_head()
                    )));
                }
            }
            (PosParams::None, PosMode::None) => {}
            _ => return Err(Error::Config("position parameters do not match pos_mode".into())),
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.map_named("", &mut |_, t| {
            n += t.numel();
            Ok(())
        })
        .expect("infallible");
        n
    }
}

fn to_heads<T: Scalar, C: Ctx<T>>(ctx: &mut C, y: &C::V, cfg: &MhsaConfig) -> Result<C::V> {
    let n = ctx.shape(y)[0];
    let y = ctx.reshape(y, &[n, cfg.heads, cfg.d_head(), cfg.positions()])?;
    ctx.permute(&y, &[0, 1, 3, 2])
}

/// 1x1 projections to per-head q, k, v, each [N, heads, H*W, d_head].
/// Positions are flattened row-major; head h owns channels
/// `h*d_head..(h+1)*d_head`. q is pre-multiplied by the logit scale.
pub fn project_qkv_in<T: Scalar, C: Ctx<T>>(
    ctx: &mut C,
    x: &C::V,
    params: &MhsaParams<C::V>,
    cfg: &MhsaConfig,
) -> Result<(C::V, C::V, C::V)> {
    cfg.check_input(ctx.shape(x))?;
    let d = cfg.d_model;
    let proj = |ctx: &mut C, w: &C::V| -> Result<C::V> {
        let w4 = ctx.reshape(w, &[d, d, 1, 1])?;
        let y = ctx.conv2d(x, &w4, 1, 0)?;
        to_heads(ctx, &y, cfg)
    };
    let q = proj(ctx, &params.wq)?;
    let q = ctx.scale(&q, cfg.logit_scale())?;
    let k = proj(ctx, &params.wk)?;
    let v = proj(ctx, &params.wv)?;
    Ok((q, k, v))
}

/// Full MHSA forward: [N, d_model, H, W] -> [N, d_model, H, W].
pub fn mhsa2d_in<T: Scalar, C: Ctx<T>>(
    ctx: &mut C,
    x: &C::V,
    params: &MhsaParams<C::V>,
    cfg: &MhsaConfig,
) -> Result<C::V> {
    let (q, k, v) = project_qkv_in(ctx, x, params, cfg)?;
    let batch = ctx.shape(x)[0];
    let (n, dh) = (cfg.positions(), cfg.d_head());
    let bh = batch * cfg.heads;
    let q = ctx.reshape(&q, &[bh, n, dh])?;
    let k = ctx.reshape(&k, &[bh, n, dh])?;
    let v = ctx.reshape(&v, &[bh, n, dh])?;

    let content = ctx.bmm(&q, &k, true)?;
    let logits = match &params.pos {
        PosParams::Relative(t) => {
            let rel = ctx.rel_logits_2d(&q, &t.r_h, &t.r_w, cfg.fm_h, cfg.fm_w)?;
            ctx.add(&content, &rel)?
        }
        PosParams::Absolute(p) => {
            let abs = ctx.abs_logits(&q, p)?;
            ctx.add(&content, &abs)?
        }
        PosParams::None => content,
    };
    let attn = ctx.softmax(&logits)?;
    let out = ctx.bmm(&attn, &v, false)?;
    let out = ctx.reshape(&out, &[batch, cfg.heads, n, dh])?;
    let out = ctx.permute(&out, &[0, 1, 3, 2])?;
    ctx.reshape(&out, &[batch, cfg.d_model, cfg.fm_h, cfg.fm_w])
}

pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    params: &MhsaParams<Tensor<T>>,
    cfg: &MhsaConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    params.validate(cfg)?;
    project_qkv_in(&mut Eager::new(), x, params, cfg)
}

fn flatten_heads<T: Scalar>(q: &Tensor<T>) -> Result<(Tensor<T>, [usize; 4])> {
    match *q.shape() {
        [n, h, p, d] => Ok((q.reshape(&[n * h, p, d])?, [n, h, p, d])),
        _ => Err(Error::shape("logits", format!("q must be [N,heads,n,d], got {:?}", q.shape()))),
    }
}

/// The `q r^T` term for q of shape [N, heads, H*W, d_head]; returns
/// [N, heads, H*W, H*W].
pub fn relative_logits_2d<T: Scalar>(
    q: &Tensor<T>,
    tables: &RelPosTables<Tensor<T>>,
    fm_h: usize,
    fm_w: usize,
) -> Result<Tensor<T>> {
    let (q3, [n, h, p, _]) = flatten_heads(q)?;
    crate::ops::rel_logits_2d(&q3, &tables.r_h, &tables.r_w, fm_h, fm_w)?.reshape(&[n, h, p, p])
}

/// The `q p^T` term with an absolute table of shape [H*W, d_head].
pub fn absolute_logits<T: Scalar>(q: &Tensor<T>, abspos: &Tensor<T>) -> Result<Tensor<T>> {
    let (q3, [n, h, p, _]) = flatten_heads(q)?;
    crate::ops::abs_logits(&q3, abspos)?.reshape(&[n, h, p, p])
}

pub fn mhsa2d<T: Scalar>(x: &Tensor<T>, params: &MhsaParams<Tensor<T>>, cfg: &MhsaConfig) -> Result<Tensor<T>> {
    params.validate(cfg)?;
    mhsa2d_in(&mut Eager::new(), x, params, cfg)
}

/// Softmax attention weights [N, heads, n, n], exposed for row-sum checks.
pub fn attention_weights<T: Scalar>(
    x: &Tensor<T>,
    params: &MhsaParams<Tensor<T>>,
    cfg: &MhsaConfig,
) -> Result<Tensor<T>> {
    params.validate(cfg)?;
    let (q, k, _) = project_qkv_in(&mut Eager::new(), x, params, cfg)?;
    let (q3, [n, h, p, _]) = flatten_heads(&q)?;
    let (k3, _) = flatten_heads(&k)?;
    let mut logits = crate::ops::bmm(&q3, &k3, true)?;
    match &params.pos {
        PosParams::Relative(t) => {
            let r = crate::ops::rel_logits_2d(&q3, &t.r_h, &t.r_w, cfg.fm_h, cfg.fm_w)?;
            logits = crate::ops::add(&logits, &r)?;
        }
        PosParams::Absolute(pa) => logits = crate::ops::add(&logits, &crate::ops::abs_logits(&q3, pa)?)?,
        PosParams::None => {}
    }
    crate::ops::softmax_lastdim(&logits).reshape(&[n, h, p, p])
}

/// Elements allocated by ops whose output is an n x n logit (or attention)
/// matrix per batch-head, summed over a trace.
pub fn logits_footprint(records: &[OpRecord], n: usize) -> usize {
    records
        .iter()
        .filter(|r| r.out_shape.len() >= 2 && r.out_shape[r.out_shape.len() - 2..] == [n, n])
        .map(|r| r.out_shape.iter().product::<usize>())
        .sum()
}

/// Non-Local layer parameters for C input channels: a C -> C/2 embedding,
/// C/2 -> C/2 query and key maps, and the C/2 -> C output map.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams<V> {
    pub w_embed: V,
    pub w_theta: V,
    pub w_phi: V,
    pub w_z: V,
}

impl<V> NonLocalParams<V> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &V) -> Result<U>) -> Result<NonLocalParams<U>> {
        Ok(NonLocalParams {
            w_embed: f(&format!("{prefix}w_embed"), &self.w_embed)?,
            w_theta: f(&format!("{prefix}w_theta"), &self.w_theta)?,
            w_phi: f(&format!("{prefix}w_phi"), &self.w_phi)?,
            w_z: f(&format!("{prefix}w_z"), &self.w_z)?,
        })
    }
}

fn nl_half(c: usize) -> Result<usize> {
    if c == 0 || c % 2 != 0 {
        return Err(Error::Config(format!("non-local layer needs an even channel count, got {c}")));
    }
    Ok(c / 2)
}

impl<T: Scalar> NonLocalParams<Tensor<T>> {
    pub fn init(channels: usize, rng: &mut ParamRng) -> Result<Self> {
        let half = nl_half(channels)?;
        Ok(Self {
            w_embed: rng.fan_in(&[half, channels], channels),
            w_theta: rng.fan_in(&[half, half], half),
            w_phi: rng.fan_in(&[half, half], half),
            w_z: rng.fan_in(&[channels, half], half),
        })
    }
}

fn pointwise<T: Scalar, C: Ctx<T>>(ctx: &mut C, x: &C::V, w: &C::V) -> Result<C::V> {
    let s = ctx.shape(w).to_vec();
    let [o, i] = s[..] else {
        return Err(Error::shape("pointwise", format!("weight must be a matrix, got {s:?}")));
    };
    let w4 = ctx.reshape(w, &[o, i, 1, 1])?;
    ctx.conv2d(x, &w4, 1, 0)
}

/// Single-head, position-free global attention with channel reduction 2:
/// `e = We x`, `A = softmax((Wtheta e)(Wphi e)^T)`, `out = x + Wz (A e)`.
/// The embedded features double as values; there is no separate value map
/// and no logit scale.
pub fn nonlocal_in<T: Scalar, C: Ctx<T>>(ctx: &mut C, x: &C::V, params: &NonLocalParams<C::V>) -> Result<C::V> {
    let s = ctx.shape(x).to_vec();
    let [batch, c, h, w] = s[..] else {
        return Err(Error::shape("nonlocal_layer", format!("expected NCHW, got {s:?}")));
    };
    let half = nl_half(c)?;
    let n = h * w;
    let e = pointwise(ctx, x, &params.w_embed)?;
    let theta = pointwise(ctx, &e, &params.w_theta)?;
    let phi = pointwise(ctx, &e, &params.w_phi)?;
    let seq = |ctx: &mut C, t: &C::V| -> Result<C::V> {
        let t = ctx.reshape(t, &[batch, half, n])?;
        ctx.permute(&t, &[0, 2, 1])
    };
    let theta = seq(ctx, &theta)?;
    let phi = seq(ctx, &phi)?;
    let values = seq(ctx, &e)?;
    let logits = ctx.bmm(&theta, &phi, true)?;
    let attn = ctx.softmax(&logits)?;
    let y = ctx.bmm(&attn, &values, false)?;
    let y = ctx.permute(&y, &[0, 2, 1])?;
    let y = ctx.reshape(&y, &[batch, half, h, w])?;
    let z = pointwise(ctx, &y, &params.w_z)?;
    ctx.add(x, &z)
}

pub fn nonlocal_layer<T: Scalar>(x: &Tensor<T>, params: &NonLocalParams<Tensor<T>>) -> Result<Tensor<T>> {
    nonlocal_in(&mut Eager::new(), x, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn cfg(d: usize, heads: usize, h: usize, w: usize, mode: PosMode) -> MhsaConfig {
        MhsaConfig::new(d, heads, h, w, mode).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(MhsaConfig::new(6, 4, 2, 2, PosMode::None).is_err());
        assert!(MhsaConfig::new(8, 4, 0, 2, PosMode::None).is_err());
        let c = cfg(512, 4, 64, 64, PosMode::Relative);
        assert_eq!(c.d_head(), 128);
        assert_eq!(c.rel_table_shapes(), ([127, 128], [127, 128]));
    }

    #[test]
    fn identity_projection_single_head() {
        let c = cfg(3, 1, 1, 1, PosMode::None);
        let p = MhsaParams {
            wq: Tensor::<f64>::eye(3),
            wk: Tensor::eye(3),
            wv: Tensor::eye(3),
            pos: PosParams::None,
        };
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap();
        let (q, _, v) = project_qkv(&x, &p, &c).unwrap();
        assert_eq!(q.shape(), &[1, 1, 1, 3]);
        let s = c.logit_scale();
        assert_eq!(q.data(), &[0.0, s, 0.0]);
        assert_eq!(v.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn resolution_mismatch_is_reported() {
        let c = cfg(8, 2, 4, 4, PosMode::Relative);
        let p = MhsaParams::<Tensor<f64>>::init(&c, &mut ParamRng::new(1));
        let x = Tensor::zeros(&[1, 8, 4, 6]);
        let err = mhsa2d(&x, &p, &c).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
        assert!(err.to_string().contains("position encodings"));
    }

    #[test]
    fn zero_tables_give_zero_logits() {
        let q = ParamRng::new(3).normal::<f64>(&[1, 2, 6, 4], 1.0);
        let tables = RelPosTables {
            r_h: Tensor::zeros(&[3, 4]),
            r_w: Tensor::zeros(&[5, 4]),
        };
        let l = relative_logits_2d(&q, &tables, 2, 3).unwrap();
        assert_eq!(l.shape(), &[1, 2, 6, 6]);
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert!(absolute_logits(&q, &Tensor::zeros(&[6, 4])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(absolute_logits(&q, &Tensor::zeros(&[5, 4])).is_err());
    }

    #[test]
    fn absolute_broadcast_case() {
        let q = Tensor::<f64>::ones(&[1, 1, 4, 1]);
        let p = Tensor::new(&[4, 1], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let l = absolute_logits(&q, &p).unwrap();
        for row in l.data().chunks(4) {
            assert_eq!(row, p.data());
        }
    }

    #[test]
    fn single_position_returns_value_projection() {
        let c = cfg(8, 4, 1, 1, PosMode::Relative);
        let p = MhsaParams::<Tensor<f64>>::init(&c, &mut ParamRng::new(5));
        let x = ParamRng::new(6).normal::<f64>(&[2, 8, 1, 1], 1.0);
        let y = mhsa2d(&x, &p, &c).unwrap();
        let want = ops::conv2d(&x, &p.wv.reshape(&[8, 8, 1, 1]).unwrap(), 1, 0).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn nonlocal_zero_output_map_is_identity() {
        let mut rng = ParamRng::new(2);
        let mut p = NonLocalParams::<Tensor<f64>>::init(8, &mut rng).unwrap();
        p.w_z = Tensor::zeros(&[8, 4]);
        let x = rng.normal(&[1, 8, 2, 3], 1.0);
        assert_eq!(nonlocal_layer(&x, &p).unwrap(), x);
        assert!(NonLocalParams::<Tensor<f64>>::init(7, &mut rng).is_err());
        assert!(nonlocal_layer(&rng.normal::<f64>(&[1, 7, 2, 2], 1.0), &p).is_err());
    }

    #[test]
    fn nonlocal_single_position() {
        let mut rng = ParamRng::new(4);
        let p = NonLocalParams::<Tensor<f64>>::init(6, &mut rng).unwrap();
        let x = rng.normal(&[1, 6, 1, 1], 1.0);
        let e = ops::matmul(&p.w_embed, &x.reshape(&[6, 1]).unwrap()).unwrap();
        let z = ops::matmul(&p.w_z, &e).unwrap();
        let want = ops::add(&x, &z.reshape(&[1, 6, 1, 1]).unwrap()).unwrap();
        assert!(nonlocal_layer(&x, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-14);
    }
}
