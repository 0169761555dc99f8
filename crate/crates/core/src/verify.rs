//! Self-verification suites: gradient checks, brute-force oracles and layer
//! properties, architecture invariants over a config matrix, and the
//! published cost anchors.

use serde::{Deserialize, Serialize};

use crate::attention::{
    mhsa2d, mhsa2d_in, nonlocal_in, nonlocal_layer, MhsaConfig, MhsaParams, NonLocalParams,
    PosMode, PosParams, RelPosTables,
};
use crate::backbone::{build_backbone, forward_in, stage_shapes, ArchSpec, BuildOptions, Family, ModelParams};
use crate::blocks::{block_in, se_gate_in, BlockParams, BlockSpec, SeParams};
use crate::cost::{compare, count_madds, count_params, measure_cost, stage_breakdown};
use crate::error::{Error, Result};
use crate::graph::{grad_check, Ctx, Eager, Tape, Var};
use crate::ops::{self, Activation};
use crate::rng::ParamRng;
use crate::tensor::Tensor;

/// Finite-difference step for every gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    /// Pass iff `measured <= threshold`.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub rows: Vec<CheckRow>,
    pub pass: bool,
    pub seed: u64,
}

impl VerifyReport {
    fn new(suite: &str, seed: u64, rows: Vec<CheckRow>) -> Self {
        let pass = rows.iter().all(|r| r.status == Status::Pass);
        Self {
            suite: suite.into(),
            rows,
            pass,
            seed,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| r.status == Status::Fail)
    }
}

fn check(name: impl Into<String>, measured: f64, threshold: f64) -> CheckRow {
    CheckRow {
        name: name.into(),
        // NaN never passes
        status: if measured <= threshold { Status::Pass } else { Status::Fail },
        measured,
        threshold,
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Oracle,
    Invariants,
    Cost,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Oracle => "oracle",
            Suite::Invariants => "invariants",
            Suite::Cost => "cost",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "oracle" => Ok(Suite::Oracle),
            "invariants" => Ok(Suite::Invariants),
            "cost" => Ok(Suite::Cost),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

/// One architecture of the invariants matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub family: Family,
    pub depth: String,
    pub res: usize,
    /// Width divisor for the executed forward (full width is only counted).
    #[serde(default = "default_forward_divisor")]
    pub forward_width_divisor: usize,
}

fn default_forward_divisor() -> usize {
    8
}

pub fn default_matrix() -> Vec<MatrixEntry> {
    let mut m = Vec::new();
    for family in [Family::Resnet, Family::Botnet] {
        for depth in ["50", "101", "152"] {
            m.push(MatrixEntry {
                family,
                depth: depth.into(),
                res: 224,
                forward_width_divisor: 8,
            });
        }
    }
    for (family, depth, res) in [
        (Family::Botnet, "50", 256),
        (Family::BotnetS1, "50", 224),
        (Family::BotnetS1, "S1-59", 224),
        (Family::Senet, "50", 224),
    ] {
        m.push(MatrixEntry {
            family,
            depth: depth.into(),
            res,
            forward_width_divisor: 8,
        });
    }
    m
}

/// Runs a suite. `matrix` replaces the default architecture matrix of the
/// invariants suite; an empty matrix passes vacuously.
pub fn run_suite(suite: Suite, seed: u64, matrix: Option<&[MatrixEntry]>) -> Result<VerifyReport> {
    let rows = match suite {
        Suite::Grad => grad_rows(seed)?,
        Suite::Oracle => oracle_rows(seed)?,
        Suite::Invariants => match matrix {
            Some(m) => invariant_rows(m)?,
            None => invariant_rows(&default_matrix())?,
        },
        Suite::Cost => cost_rows()?,
        Suite::All => {
            let mut rows = grad_rows(seed)?;
            rows.extend(oracle_rows(seed)?);
            match matrix {
                Some(m) => rows.extend(invariant_rows(m)?),
                None => rows.extend(invariant_rows(&default_matrix())?),
            }
            rows.extend(cost_rows()?);
            rows
        }
    };
    Ok(VerifyReport::new(suite.name(), seed, rows))
}

// ---------------------------------------------------------------- gradients

/// Flattens a parameter tree into tape inputs after `x`, and rebuilds it from
/// the matching vars.
struct Flat<P> {
    tree: P,
    leaves: Vec<Tensor<f64>>,
}

macro_rules! flat {
    ($tree:expr, $($prefix:expr)?) => {{
        let tree = $tree;
        let mut leaves = Vec::new();
        tree.map_named($($prefix,)? &mut |_, t: &Tensor<f64>| {
            leaves.push(t.clone());
            Ok(())
        })?;
        Flat { tree, leaves }
    }};
}

fn inputs(x: &Tensor<f64>, leaves: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    std::iter::once(x.clone()).chain(leaves.iter().cloned()).collect()
}

/// Scalar loss `sum(out * probe)` with a fixed random probe.
fn probe_loss(tape: &mut Tape<f64>, out: &Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.input(probe.clone());
    let m = tape.mul(out, &p)?;
    tape.sum_all(&m)
}

fn rebuild_counter(vars: &[Var]) -> impl FnMut(&str, &Tensor<f64>) -> Result<Var> + '_ {
    let mut i = 1;
    move |_, _| {
        let v = vars[i];
        i += 1;
        Ok(v)
    }
}

fn grad_mhsa(seed: u64, mode: PosMode) -> Result<f64> {
    let mut rng = ParamRng::new(seed);
    let cfg = MhsaConfig::new(8, 2, 4, 5, mode)?;
    let x: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let probe: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let f = flat!(MhsaParams::<Tensor<f64>>::init(&cfg, &mut rng), "");
    let r = grad_check(
        |tape, vars| {
            let p = f.tree.map_named("", &mut rebuild_counter(vars))?;
            let y = mhsa2d_in(tape, &vars[0], &p, &cfg)?;
            probe_loss(tape, &y, &probe)
        },
        &inputs(&x, &f.leaves),
        FD_STEP,
    )?;
    Ok(r.max_rel_err)
}

fn grad_nonlocal(seed: u64) -> Result<f64> {
    let mut rng = ParamRng::new(seed);
    let x: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let probe: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let f = flat!(NonLocalParams::<Tensor<f64>>::init(8, &mut rng)?, "");
    let r = grad_check(
        |tape, vars| {
            let p = f.tree.map_named("", &mut rebuild_counter(vars))?;
            let y = nonlocal_in(tape, &vars[0], &p)?;
            probe_loss(tape, &y, &probe)
        },
        &inputs(&x, &f.leaves),
        FD_STEP,
    )?;
    Ok(r.max_rel_err)
}

fn grad_block(seed: u64, spec: &BlockSpec, x_shape: &[usize]) -> Result<f64> {
    let mut rng = ParamRng::new(seed);
    let x: Tensor<f64> = rng.normal(x_shape, 1.0);
    let out_shape = [
        x_shape[0],
        spec.out_channels,
        spec.out_extent(x_shape[2]),
        spec.out_extent(x_shape[3]),
    ];
    let probe: Tensor<f64> = rng.normal(&out_shape, 1.0);
    let f = flat!(BlockParams::<Tensor<f64>>::init(spec, &mut rng)?, "");
    let r = grad_check(
        |tape, vars| {
            let p = f.tree.map_named("", &mut rebuild_counter(vars))?;
            let y = block_in(tape, &vars[0], spec, &p)?;
            probe_loss(tape, &y, &probe)
        },
        &inputs(&x, &f.leaves),
        FD_STEP,
    )?;
    Ok(r.max_rel_err)
}

fn grad_se(seed: u64) -> Result<f64> {
    let mut rng = ParamRng::new(seed);
    let x: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let probe: Tensor<f64> = rng.normal(&[2, 8, 4, 5], 1.0);
    let f = flat!(SeParams::<Tensor<f64>>::init(8, 4, &mut rng), "");
    let r = grad_check(
        |tape, vars| {
            let p = f.tree.map_named("", &mut rebuild_counter(vars))?;
            let y = se_gate_in(tape, &vars[0], &p, Activation::Relu)?;
            probe_loss(tape, &y, &probe)
        },
        &inputs(&x, &f.leaves),
        FD_STEP,
    )?;
    Ok(r.max_rel_err)
}

/// Block specs used by the gradient checks (all inputs at most 2x8x4x5).
pub fn grad_block_specs() -> Result<Vec<(&'static str, BlockSpec, [usize; 4])>> {
    let relu = Activation::Relu;
    Ok(vec![
        (
            "bot_block.stride1",
            BlockSpec::bot(8, 4, 1, MhsaConfig::new(4, 2, 4, 5, PosMode::Relative)?, relu),
            [2, 8, 4, 5],
        ),
        (
            "bot_block.stride2",
            BlockSpec::bot(8, 4, 2, MhsaConfig::new(4, 2, 4, 4, PosMode::Relative)?, relu),
            [2, 8, 4, 4],
        ),
        ("bottleneck_block.identity", BlockSpec::conv_bottleneck(8, 2, 1, relu), [2, 8, 4, 5]),
        ("bottleneck_block.stride2", BlockSpec::conv_bottleneck(8, 4, 2, relu), [2, 8, 4, 5]),
    ])
}

fn grad_rows(seed: u64) -> Result<Vec<CheckRow>> {
    let specs = grad_block_specs()?;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, e)) => *e = e.max(err),
        None => worst.push((name.to_string(), err)),
    };
    for s in seed..seed + GRAD_SEEDS {
        for (label, mode) in [
            ("mhsa2d.relative", PosMode::Relative),
            ("mhsa2d.absolute", PosMode::Absolute),
            ("mhsa2d.none", PosMode::None),
        ] {
            record(label, grad_mhsa(s, mode)?);
        }
        record("nonlocal_layer", grad_nonlocal(s)?);
        for (label, spec, shape) in &specs {
            record(label, grad_block(s, spec, shape)?);
        }
        record("se_gate", grad_se(s)?);
    }
    Ok(worst
        .into_iter()
        .map(|(n, e)| check(format!("grad.{n}"), e, GRAD_TOL))
        .collect())
}

// ---------------------------------------------------------- oracles & props

/// All-pairs relative logits computed position by position.
fn naive_rel_logits(q: &Tensor<f64>, r_h: &Tensor<f64>, r_w: &Tensor<f64>, h: usize, w: usize) -> Vec<f64> {
    let (b, n, d) = (q.shape()[0], h * w, q.shape()[2]);
    let mut out = vec![0.0; b * n * n];
    for bi in 0..b {
        for (qi, qj) in (0..h).flat_map(|i| (0..w).map(move |j| (i, j))) {
            for (ki, kj) in (0..h).flat_map(|i| (0..w).map(move |j| (i, j))) {
                let rh = ki + h - 1 - qi;
                let rw = kj + w - 1 - qj;
                let mut acc = 0.0;
                for c in 0..d {
                    let r = r_h.at(&[rh, c]) + r_w.at(&[rw, c]);
                    acc += q.at(&[bi, qi * w + qj, c]) * r;
                }
                out[(bi * n + qi * w + qj) * n + ki * w + kj] = acc;
            }
        }
    }
    out
}

/// Scalar-loop MHSA: per head, per query position, explicit softmax.
fn naive_mhsa(x: &Tensor<f64>, p: &MhsaParams<Tensor<f64>>, cfg: &MhsaConfig) -> Tensor<f64> {
    let [nb, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let n = h * w;
    let dh = cfg.d_head();
    let proj = |wm: &Tensor<f64>, b: usize, pos: usize, o: usize| -> f64 {
        (0..d).map(|c| wm.at(&[o, c]) * x.at(&[b, c, pos / w, pos % w])).sum()
    };
    let mut out = vec![0.0; nb * d * n];
    for b in 0..nb {
        for head in 0..cfg.heads {
            let ch = |c: usize| head * dh + c;
            for i in 0..n {
                let q: Vec<f64> = (0..dh).map(|c| proj(&p.wq, b, i, ch(c)) * cfg.logit_scale()).collect();
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        let mut key = proj(&p.wk, b, j, ch(c));
                        key += match &p.pos {
                            PosParams::Relative(t) => {
                                t.r_h.at(&[j / w + h - 1 - i / w, c]) + t.r_w.at(&[j % w + w - 1 - i % w, c])
                            }
                            PosParams::Absolute(a) => a.at(&[j, c]),
                            PosParams::None => 0.0,
                        };
                        acc += q[c] * key;
                    }
                    *l = acc;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for (j, l) in logits.iter().enumerate() {
                        acc += (l - m).exp() / z * proj(&p.wv, b, j, ch(c));
                    }
                    out[(b * d + ch(c)) * n + i] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

/// The Non-Local layer rebuilt from a single-head position-free MHSA.
fn nl_via_mhsa(x: &Tensor<f64>, p: &NonLocalParams<Tensor<f64>>) -> Result<Tensor<f64>> {
    let c = x.shape()[1];
    let half = c / 2;
    let conv1x1 = |x: &Tensor<f64>, w: &Tensor<f64>| -> Result<Tensor<f64>> {
        let s = w.shape();
        ops::conv2d(x, &w.reshape(&[s[0], s[1], 1, 1])?, 1, 0)
    };
    let e = conv1x1(x, &p.w_embed)?;
    let cfg = MhsaConfig::new(half, 1, x.shape()[2], x.shape()[3], PosMode::None)?;
    let mp = MhsaParams {
        wq: p.w_theta.map(|v| v * (half as f64).sqrt()),
        wk: p.w_phi.clone(),
        wv: Tensor::eye(half),
        pos: PosParams::None,
    };
    let a = mhsa2d(&e, &mp, &cfg)?;
    ops::add(x, &conv1x1(&a, &p.w_z)?)
}

fn permute_positions(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let hw = s[2] * s[3];
    Tensor::from_fn(s, |i| x.data()[i - i % hw + perm[i % hw]])
}

fn oracle_rows(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ParamRng::new(seed);
    let mut rows = Vec::new();

    let mut worst = 0.0f64;
    for h in 1..=6 {
        for w in 1..=6 {
            let d = 3;
            let q: Tensor<f64> = rng.normal(&[2, h * w, d], 1.0);
            let r_h: Tensor<f64> = rng.normal(&[2 * h - 1, d], 1.0);
            let r_w: Tensor<f64> = rng.normal(&[2 * w - 1, d], 1.0);
            let got = ops::rel_logits_2d(&q, &r_h, &r_w, h, w)?;
            let want = naive_rel_logits(&q, &r_h, &r_w, h, w);
            for (a, b) in got.data().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    rows.push(check("oracle.relative_logits_2d.h,w<=6", worst, 1e-12));

    for mode in [PosMode::Relative, PosMode::Absolute, PosMode::None] {
        let cfg = MhsaConfig::new(8, 2, 3, 4, mode)?;
        let x: Tensor<f64> = rng.normal(&[2, 8, 3, 4], 1.0);
        let p = MhsaParams::init(&cfg, &mut rng);
        let err = mhsa2d(&x, &p, &cfg)?.max_abs_diff(&naive_mhsa(&x, &p, &cfg))?;
        rows.push(check(format!("oracle.mhsa2d.naive.{mode:?}").to_lowercase(), err, 1e-11));
    }

    let x: Tensor<f64> = rng.normal(&[2, 8, 3, 4], 1.0);
    let p = NonLocalParams::init(8, &mut rng)?;
    let err = nonlocal_layer(&x, &p)?.max_abs_diff(&nl_via_mhsa(&x, &p)?)?;
    rows.push(check("oracle.nonlocal_layer.mhsa_construction", err, 1e-11));

    // softmax rows
    let logits: Tensor<f64> = rng.normal(&[3, 7, 11], 10.0);
    let sm = ops::softmax_lastdim(&logits);
    let worst = sm
        .data()
        .chunks(11)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    rows.push(check("property.softmax_rows_sum_to_one", worst, 1e-9));

    // permutation equivariance without position terms
    let cfg = MhsaConfig::new(8, 2, 3, 4, PosMode::None)?;
    let p = MhsaParams::init(&cfg, &mut rng);
    let x: Tensor<f64> = rng.normal(&[1, 8, 3, 4], 1.0);
    let y = mhsa2d(&x, &p, &cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let keys: Tensor<f64> = rng.uniform(&[12], 0.0, 1.0);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
        let lhs = mhsa2d(&permute_positions(&x, &perm), &p, &cfg)?;
        worst = worst.max(lhs.max_abs_diff(&permute_positions(&y, &perm))?);
    }
    rows.push(check("property.mhsa2d.permutation_equivariance", worst, 1e-9));

    // zero relative tables == no position term, exactly
    let rel = MhsaConfig::new(8, 2, 3, 4, PosMode::Relative)?;
    let (sh, sw) = rel.rel_table_shapes();
    let zeroed = MhsaParams {
        pos: PosParams::Relative(RelPosTables {
            r_h: Tensor::zeros(&sh),
            r_w: Tensor::zeros(&sw),
        }),
        ..p.clone()
    };
    let diff = mhsa2d(&x, &zeroed, &rel)?.max_abs_diff(&y)?;
    rows.push(check("property.zero_tables_equal_content_only", diff, 0.0));

    // one position: softmax over a single key is 1, output is Wv x
    let one = MhsaConfig::new(8, 2, 1, 1, PosMode::Relative)?;
    let p1 = MhsaParams::init(&one, &mut rng);
    let x1: Tensor<f64> = rng.normal(&[2, 8, 1, 1], 1.0);
    let want = ops::matmul(&x1.reshape(&[2, 8])?, &ops::permute(&p1.wv, &[1, 0])?)?.reshape(&[2, 8, 1, 1])?;
    let diff = mhsa2d(&x1, &p1, &one)?.max_abs_diff(&want)?;
    rows.push(check("property.single_position_is_value_projection", diff, 1e-12));

    // resolution dependency
    let wrong: Tensor<f64> = Tensor::zeros(&[1, 8, 4, 4]);
    let refused = matches!(mhsa2d(&wrong, &p, &cfg), Err(Error::Resolution { .. }));
    rows.push(check("property.mhsa2d.rejects_other_resolution", (!refused) as u8 as f64, 0.0));

    Ok(rows)
}

// ------------------------------------------------------------ architectures

fn entry_arch(e: &MatrixEntry, div: usize) -> Result<ArchSpec> {
    let opts = BuildOptions {
        width_divisor: div,
        ..BuildOptions::at(e.res)
    };
    build_backbone(e.family, &e.depth, &opts)
}

fn invariant_rows(matrix: &[MatrixEntry]) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for e in matrix {
        let tag = format!("{}-{}@{}", e.family.name(), e.depth, e.res);
        let arch = entry_arch(e, 1)?;
        let res = arch.input_res;

        // params do not depend on resolution; madds grow with it
        let here = count_madds(&arch, res)?;
        let double = count_madds(&arch, (2 * res.0, 2 * res.1))?;
        let drift = here.totals.params.abs_diff(double.totals.params) as f64;
        rows.push(check(format!("invariant.{tag}.params_resolution_free"), drift, 0.0));
        let shrink = (double.totals.madds < here.totals.madds) as u8 as f64;
        rows.push(check(format!("invariant.{tag}.madds_monotone"), shrink, 0.0));

        // conv-only stages scale exactly with pixel count
        let a = stage_breakdown(&arch, res)?;
        let b = stage_breakdown(&arch, (2 * res.0, 2 * res.1))?;
        let mut bad = 0u32;
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            if y.conv != 4 * x.conv || y.attn_logits() != 16 * x.attn_logits() {
                bad += 1;
            }
        }
        rows.push(check(format!("invariant.{tag}.scaling_4x_16x"), bad as f64, 0.0));

        if matches!(e.family, Family::Botnet | Family::Resnet) {
            let mut opts = BuildOptions::at(e.res);
            opts.replacement = Some(vec![false; arch.depths[3]]);
            let empty = build_backbone(Family::Botnet, &e.depth, &opts)?;
            let plain = build_backbone(Family::Resnet, &e.depth, &BuildOptions::at(e.res))?;
            let p = count_params(&empty)?.totals.params.abs_diff(count_params(&plain)?.totals.params);
            let same = empty.same_structure(&plain)
                && stage_shapes(&empty, res)? == stage_shapes(&plain, res)?;
            rows.push(check(
                format!("invariant.{tag}.empty_replacement_is_resnet"),
                p as f64 + (!same) as u8 as f64,
                0.0,
            ));
        }
        if e.family == Family::BotnetS1 {
            let r = e.res / 16;
            let bad = arch
                .attention_configs()
                .filter(|c| c.rel_table_shapes().0[0] != 2 * r - 1 || c.rel_table_shapes().1[0] != 2 * r - 1)
                .count();
            rows.push(check(format!("invariant.{tag}.s1_tables_sized_2r-1"), bad as f64, 0.0));
        }

        // executed forward at reduced width: shapes and brute-force counts
        let small = entry_arch(e, e.forward_width_divisor)?;
        let params = ModelParams::<Tensor<f32>>::init(&small, 0)?;
        let mut ctx = Eager::new();
        let x = Ctx::<f32>::input(&mut ctx, Tensor::zeros(&[1, 3, res.0, res.1]));
        let out = forward_in(&mut ctx, &small, &params, &x)?;
        let shapes_ok = out.stages == stage_shapes(&small, res)?;
        rows.push(check(
            format!("invariant.{tag}.stage_shapes_match_forward"),
            (!shapes_ok) as u8 as f64,
            0.0,
        ));
        let model = count_params(&small)?;
        let measured = measure_cost(&small, &params)?;
        let mismatch = model
            .rows
            .iter()
            .zip(&measured.rows)
            .filter(|(m, x)| m != x)
            .count()
            + model.rows.len().abs_diff(measured.rows.len());
        rows.push(check(
            format!("invariant.{tag}.cost_matches_brute_force"),
            mismatch as f64,
            0.0,
        ));
    }
    Ok(rows)
}

// --------------------------------------------------------------- cost anchors

/// Published reference figures the cost model is held to.
pub mod reference {
    pub const R50_PARAMS: f64 = 25.5e6;
    pub const BOT50_PARAMS: f64 = 20.8e6;
    pub const PARAMS_TOL: f64 = 0.01;
    pub const R50_MADDS_224: f64 = 3.86e9;
    pub const BOT50_MADDS_224: f64 = 3.79e9;
    pub const BOTS1_50_MADDS_224: f64 = 4.27e9;
    pub const S1_DELTA_224: f64 = 0.48e9;
    pub const R50_MADDS_1024: f64 = 85.4e9;
    pub const BOT50_MADDS_1024: f64 = 102.98e9;
    pub const DELTA_1024: f64 = 17.58e9;
    pub const MADDS_TOL: f64 = 0.10;
    pub const DELTA_TOL: f64 = 0.25;
}

fn cost_rows() -> Result<Vec<CheckRow>> {
    use reference::*;
    let at = |f: Family, d: &str, res: usize| build_backbone(f, d, &BuildOptions::at(res));
    let mut rows = Vec::new();

    let r50 = at(Family::Resnet, "50", 224)?;
    let bot50 = at(Family::Botnet, "50", 224)?;
    let s1 = at(Family::BotnetS1, "50", 224)?;
    let p = |a: &ArchSpec| -> Result<f64> { Ok(count_params(a)?.totals.params as f64) };
    rows.push(check("cost.params.R50", rel_err(p(&r50)?, R50_PARAMS), PARAMS_TOL));
    rows.push(check("cost.params.BoT50", rel_err(p(&bot50)?, BOT50_PARAMS), PARAMS_TOL));
    rows.push(check("cost.params.BoT-S1-50", rel_err(p(&s1)?, BOT50_PARAMS), PARAMS_TOL));
    let mut larger = 0;
    for d in ["50", "101", "152"] {
        if p(&at(Family::Botnet, d, 224)?)? >= p(&at(Family::Resnet, d, 224)?)? {
            larger += 1;
        }
    }
    rows.push(check("cost.params.bot_smaller_than_resnet", larger as f64, 0.0));

    let m = |a: &ArchSpec| -> Result<f64> { Ok(count_madds(a, a.input_res)?.totals.madds as f64) };
    let (mr, mb, ms) = (m(&r50)?, m(&bot50)?, m(&s1)?);
    rows.push(check("cost.madds224.R50", rel_err(mr, R50_MADDS_224), MADDS_TOL));
    rows.push(check("cost.madds224.BoT50", rel_err(mb, BOT50_MADDS_224), MADDS_TOL));
    rows.push(check("cost.madds224.BoT-S1-50", rel_err(ms, BOTS1_50_MADDS_224), MADDS_TOL));
    rows.push(check("cost.madds224.ordering", (!(mb < mr && mr < ms)) as u8 as f64, 0.0));
    rows.push(check("cost.madds224.s1_delta", rel_err(ms - mb, S1_DELTA_224), DELTA_TOL));
    rows.push(check(
        "cost.madds224.bot_minus_resnet",
        rel_err(mb - mr, BOT50_MADDS_224 - R50_MADDS_224),
        DELTA_TOL,
    ));

    let r1024 = at(Family::Resnet, "50", 1024)?;
    let b1024 = at(Family::Botnet, "50", 1024)?;
    let (mr, mb) = (m(&r1024)?, m(&b1024)?);
    rows.push(check("cost.madds1024.R50", rel_err(mr, R50_MADDS_1024), MADDS_TOL));
    rows.push(check("cost.madds1024.BoT50", rel_err(mb, BOT50_MADDS_1024), MADDS_TOL));
    rows.push(check("cost.madds1024.delta", rel_err(mb - mr, DELTA_1024), MADDS_TOL));
    let cmp = compare(&b1024, &r1024, (1024, 1024))?;
    let outside_c5 = cmp.rows.iter().filter(|r| r.stage != "c5" && !r.is_zero()).count();
    rows.push(check("cost.compare1024.only_c5_differs", outside_c5 as f64, 0.0));

    // one c5 block at d=512: 3x3 conv minus the three projections
    let relu = Activation::Relu;
    let conv = crate::cost::block_cost(&BlockSpec::conv_bottleneck(2048, 512, 1, relu), 32, 32).0;
    let cfg = MhsaConfig::new(512, 4, 32, 32, PosMode::None)?;
    let bot = crate::cost::block_cost(&BlockSpec::bot(2048, 512, 1, cfg, relu), 32, 32).0;
    rows.push(check(
        "cost.block_delta.d512",
        (conv as f64 - bot as f64 - 1_572_864.0).abs(),
        0.0,
    ));
    Ok(rows)
}
