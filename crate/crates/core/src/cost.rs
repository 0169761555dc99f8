//! Parameter and multiply-add accounting.
//!
//! Counting rules (tag [`CONVENTION`]):
//! conv `Cout·Cin·k²·Hout·Wout`; fully connected `in·out`; per MHSA layer
//! `3·n·d²` for the projections, `heads·n²·d_head` each for `qkᵀ` and `A·v`,
//! and `n·(2H−1+2W−1)·d` for the gathered relative logits (`n²·d` for
//! absolute ones). BatchNorm, activations, pooling, softmax, residual adds and
//! the logit scale are free. BatchNorm running statistics are not parameters.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{MhsaConfig, PosMode};
use crate::backbone::{forward_in, group_summary, stage_shapes, ArchSpec, ModelParams, STAGES};
use crate::blocks::{is_trainable, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::graph::{Ctx, Eager};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CONVENTION: &str = "botkit-madds-v1";

/// Detection-context totals (backbone + FPN + heads) quoted for context by the
/// CLI. Outside what this crate models, so never asserted.
pub const DETECTION_REFERENCE_MADDS: [(&str, f64); 3] =
    [("BoT50", 121e9), ("R101", 162.99e9), ("R152", 240.56e9)];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub stage: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub resolution: [usize; 2],
    pub convention: String,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

/// Multiply-adds split by the kind of work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaddsBreakdown {
    pub conv: u64,
    pub linear: u64,
    pub attn_proj: u64,
    /// qkᵀ
    pub attn_content: u64,
    /// A·v
    pub attn_values: u64,
    pub attn_position: u64,
}

impl MaddsBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.attn_proj + self.attn_content + self.attn_values + self.attn_position
    }

    /// The n²-scaling terms.
    pub fn attn_logits(&self) -> u64 {
        self.attn_content + self.attn_values
    }

    fn add(&mut self, o: &Self) {
        self.conv += o.conv;
        self.linear += o.linear;
        self.attn_proj += o.attn_proj;
        self.attn_content += o.attn_content;
        self.attn_values += o.attn_values;
        self.attn_position += o.attn_position;
    }
}

impl CostReport {
    fn from_rows(arch: &str, res: (usize, usize), convention: &str, rows: Vec<CostRow>) -> Self {
        let totals = CostTotals {
            params: rows.iter().map(|r| r.params).sum(),
            madds: rows.iter().map(|r| r.madds).sum(),
        };
        Self {
            arch: arch.to_string(),
            resolution: [res.0, res.1],
            convention: convention.to_string(),
            rows,
            totals,
        }
    }

    pub fn row(&self, stage: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} @ {}x{} ({})",
            self.arch, self.resolution[0], self.resolution[1], self.convention
        );
        let _ = writeln!(out, "{:<8}{:>16}{:>20}", "stage", "params", "M.Adds");
        for r in &self.rows {
            let _ = writeln!(out, "{:<8}{:>16}{:>20}", r.stage, r.params, r.madds);
        }
        footer(&mut out, 8, self.totals);
        out
    }
}

fn footer(out: &mut String, pad: usize, t: CostTotals) {
    let _ = writeln!(out, "{:<pad$}{:>12}", "# params", sci(t.params as f64));
    let _ = writeln!(out, "{:<pad$}{:>12}", "M.Adds", sci(t.madds as f64));
}

/// `20.8x10^6` style, matching how cost footers are usually printed.
pub fn sci(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = (v.abs().log10().floor() as i32 / 3) * 3;
    let exp = exp.max(0);
    format!("{:.2}x10^{exp}", v / 10f64.powi(exp))
}

fn u(x: usize) -> u64 {
    x as u64
}

fn mhsa_cost(cfg: &MhsaConfig, h: usize, w: usize) -> (u64, MaddsBreakdown) {
    let d = u(cfg.d_model);
    let dh = u(cfg.d_head());
    let n = u(h * w);
    let pos_params = match cfg.pos_mode {
        PosMode::Relative => u(2 * cfg.fm_h - 1 + 2 * cfg.fm_w - 1) * dh,
        PosMode::Absolute => u(cfg.positions()) * dh,
        PosMode::None => 0,
    };
    let attn_position = match cfg.pos_mode {
        PosMode::Relative => n * u(2 * h - 1 + 2 * w - 1) * d,
        PosMode::Absolute => n * n * d,
        PosMode::None => 0,
    };
    let heads = u(cfg.heads);
    let m = MaddsBreakdown {
        attn_proj: 3 * n * d * d,
        attn_content: heads * n * n * dh,
        attn_values: heads * n * n * dh,
        attn_position,
        ..Default::default()
    };
    (3 * d * d + pos_params, m)
}

/// Parameters and madds of one block seeing an `h x w` input.
pub fn block_cost(spec: &BlockSpec, h: usize, w: usize) -> (u64, MaddsBreakdown) {
    let (cin, mid, cout) = (u(spec.in_channels), u(spec.mid_channels), u(spec.out_channels));
    let n_in = u(h * w);
    let mut m = MaddsBreakdown::default();
    if spec.kind == BlockKind::NlInsert {
        let half = mid;
        m.attn_proj = n_in * (cin * half + 2 * half * half + half * cin);
        m.attn_content = n_in * n_in * half;
        m.attn_values = n_in * n_in * half;
        return (cin * half + 2 * half * half + half * cin, m);
    }
    let n_out = u(spec.out_extent(h) * spec.out_extent(w));
    let bn = |c: u64| 2 * c;
    let mut params = cin * mid + bn(mid) + bn(mid) + mid * cout + bn(cout);
    m.conv = n_in * cin * mid + n_out * mid * cout;
    match &spec.attention {
        Some(cfg) => {
            let (p, a) = mhsa_cost(cfg, h, w);
            params += p;
            m.add(&a);
        }
        None => {
            params += mid * mid * 9;
            m.conv += n_out * mid * mid * 9;
        }
    }
    if let Some(r) = spec.se_width() {
        let r = u(r);
        params += 2 * cout * r;
        m.linear += 2 * cout * r;
    }
    if spec.has_projection() {
        params += cin * cout + bn(cout);
        m.conv += n_out * cin * cout;
    }
    (params, m)
}

struct StageCost {
    stage: &'static str,
    params: u64,
    madds: MaddsBreakdown,
}

fn walk(arch: &ArchSpec, res: (usize, usize)) -> Result<Vec<StageCost>> {
    let shapes = stage_shapes(arch, res)?;
    let s = &arch.stem;
    let stem_out = u(shapes[0].h * shapes[0].w);
    let mut out = vec![StageCost {
        stage: "c1",
        params: u(s.out_channels * s.in_channels * s.kernel * s.kernel + 2 * s.out_channels),
        madds: MaddsBreakdown {
            conv: stem_out * u(s.out_channels * s.in_channels * s.kernel * s.kernel),
            ..Default::default()
        },
    }];
    // after the 3x3/2 max pool
    let (mut h, mut w) = (shapes[0].h.div_ceil(2), shapes[0].w.div_ceil(2));
    for (g, blocks) in arch.groups.iter().enumerate() {
        let mut sc = StageCost {
            stage: STAGES[g],
            params: 0,
            madds: MaddsBreakdown::default(),
        };
        for b in blocks {
            let (p, m) = block_cost(b, h, w);
            sc.params += p;
            sc.madds.add(&m);
            h = b.out_extent(h);
            w = b.out_extent(w);
        }
        out.push(sc);
    }
    if let Some(head) = &arch.head {
        let (f, k) = (u(head.in_features), u(head.n_classes));
        out.push(StageCost {
            stage: "head",
            params: f * k + k,
            madds: MaddsBreakdown {
                linear: f * k,
                ..Default::default()
            },
        });
    }
    Ok(out)
}

/// Per-stage cost at `res` (parameters do not depend on it).
pub fn count_madds(arch: &ArchSpec, res: (usize, usize)) -> Result<CostReport> {
    let rows = walk(arch, res)?
        .into_iter()
        .map(|s| CostRow {
            stage: s.stage.into(),
            params: s.params,
            madds: s.madds.total(),
        })
        .collect();
    Ok(CostReport::from_rows(&arch.name, res, CONVENTION, rows))
}

/// Cost at the architecture's own input resolution.
pub fn count_params(arch: &ArchSpec) -> Result<CostReport> {
    count_madds(arch, arch.input_res)
}

/// Whole-network madds split by kind of work.
pub fn madds_breakdown(arch: &ArchSpec, res: (usize, usize)) -> Result<MaddsBreakdown> {
    let mut total = MaddsBreakdown::default();
    for s in walk(arch, res)? {
        total.add(&s.madds);
    }
    Ok(total)
}

/// Per-stage breakdown, in stage order.
pub fn stage_breakdown(arch: &ArchSpec, res: (usize, usize)) -> Result<Vec<(String, MaddsBreakdown)>> {
    Ok(walk(arch, res)?.into_iter().map(|s| (s.stage.to_string(), s.madds)).collect())
}

/// Counts by walking instantiated parameters and the ops executed by a real
/// forward at the architecture's input resolution.
pub fn measure_cost<T: Scalar>(arch: &ArchSpec, params: &ModelParams<Tensor<T>>) -> Result<CostReport> {
    let mut stage_params: Vec<(String, u64)> = Vec::new();
    params.visit(&mut |name, t| {
        if !is_trainable(name) {
            return;
        }
        let stage = match name.split('.').next() {
            Some("stem") => "c1",
            Some(s) => s,
            None => "",
        };
        match stage_params.iter_mut().find(|(s, _)| s == stage) {
            Some((_, n)) => *n += u(t.numel()),
            None => stage_params.push((stage.to_string(), u(t.numel()))),
        }
    });
    let (h, w) = arch.input_res;
    let mut ctx = Eager::tracing();
    let x = Ctx::<T>::input(&mut ctx, Tensor::zeros(&[1, arch.stem.in_channels, h, w]));
    forward_in(&mut ctx, arch, params, &x)?;
    let rows = stage_params
        .into_iter()
        .map(|(stage, params)| {
            let madds = ctx
                .records()
                .iter()
                .filter(|r| r.stage == stage)
                .map(|r| r.madds)
                .sum();
            CostRow { stage, params, madds }
        })
        .collect();
    Ok(CostReport::from_rows(&arch.name, arch.input_res, "measured", rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub stage: String,
    pub params_a: u64,
    pub params_b: u64,
    pub params_delta: i64,
    pub madds_a: u64,
    pub madds_b: u64,
    pub madds_delta: i64,
    /// madds_a / madds_b; null when madds_b is zero.
    pub madds_ratio: Option<f64>,
}

impl CompareRow {
    fn new(stage: &str, a: (u64, u64), b: (u64, u64)) -> Self {
        Self {
            stage: stage.into(),
            params_a: a.0,
            params_b: b.0,
            params_delta: a.0 as i64 - b.0 as i64,
            madds_a: a.1,
            madds_b: b.1,
            madds_delta: a.1 as i64 - b.1 as i64,
            madds_ratio: (b.1 != 0).then(|| a.1 as f64 / b.1 as f64),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.params_delta == 0 && self.madds_delta == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub a: String,
    pub b: String,
    pub resolution: [usize; 2],
    pub rows: Vec<CompareRow>,
    pub totals: CompareRow,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} vs {} @ {}x{}",
            self.a, self.b, self.resolution[0], self.resolution[1]
        );
        let _ = writeln!(
            out,
            "{:<8}{:>14}{:>14}{:>14}{:>18}{:>18}{:>18}{:>9}",
            "stage", "params a", "params b", "d params", "M.Adds a", "M.Adds b", "d M.Adds", "ratio"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.totals)) {
            let ratio = r.madds_ratio.map_or("-".to_string(), |x| format!("{x:.3}"));
            let _ = writeln!(
                out,
                "{:<8}{:>14}{:>14}{:>14}{:>18}{:>18}{:>18}{:>9}",
                r.stage, r.params_a, r.params_b, r.params_delta, r.madds_a, r.madds_b, r.madds_delta, ratio
            );
        }
        out
    }
}

/// Row-aligned a − b deltas of two reports at the same resolution.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> Result<CompareReport> {
    if a.resolution != b.resolution {
        return Err(Error::Config(format!(
            "cannot compare reports at {:?} and {:?}",
            a.resolution, b.resolution
        )));
    }
    let mut stages: Vec<&str> = a.rows.iter().map(|r| r.stage.as_str()).collect();
    for r in &b.rows {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let get = |rep: &CostReport, s: &str| rep.row(s).map_or((0, 0), |r| (r.params, r.madds));
    let rows = stages.iter().map(|s| CompareRow::new(s, get(a, s), get(b, s))).collect();
    Ok(CompareReport {
        a: a.arch.clone(),
        b: b.arch.clone(),
        resolution: a.resolution,
        rows,
        totals: CompareRow::new(
            "total",
            (a.totals.params, a.totals.madds),
            (b.totals.params, b.totals.madds),
        ),
    })
}

pub fn compare(a: &ArchSpec, b: &ArchSpec, res: (usize, usize)) -> Result<CompareReport> {
    compare_reports(&count_madds(a, res)?, &count_madds(b, res)?)
}

/// Stage table with output shapes and block kinds, plus cost footers.
pub fn describe_table(arch: &ArchSpec) -> Result<String> {
    let shapes = stage_shapes(arch, arch.input_res)?;
    let report = count_params(arch)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} ({}) @ {}x{}",
        arch.name,
        arch.family.name(),
        arch.input_res.0,
        arch.input_res.1
    );
    let _ = writeln!(
        out,
        "{:<8}{:<16}{:<24}{:>14}{:>18}",
        "stage", "output", "blocks", "params", "M.Adds"
    );
    for row in &report.rows {
        let (output, blocks) = match row.stage.as_str() {
            "head" => {
                let k = arch.head.as_ref().map_or(0, |h| h.n_classes);
                (format!("{k}"), "gap, fc".to_string())
            }
            "c1" => {
                let s = &shapes[0];
                (format!("{}x{}x{}", s.h, s.w, s.c), "7x7 conv/2".to_string())
            }
            stage => {
                let g = STAGES.iter().position(|&x| x == stage).unwrap_or(0);
                let s = &shapes[g + 1];
                let mut label = group_summary(&arch.groups[g]);
                if g == 0 {
                    label = format!("maxpool, {label}");
                }
                (format!("{}x{}x{}", s.h, s.w, s.c), label)
            }
        };
        let _ = writeln!(
            out,
            "{:<8}{:<16}{:<24}{:>14}{:>18}",
            row.stage, output, blocks, row.params, row.madds
        );
    }
    footer(&mut out, 8, report.totals);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BuildOptions, Family};

    fn arch(f: Family, d: &str, res: usize) -> ArchSpec {
        build_backbone(f, d, &BuildOptions::at(res)).unwrap()
    }

    #[test]
    fn r50_canonical_params() {
        // torchvision-style ResNet-50: 25,557,032
        assert_eq!(count_params(&arch(Family::Resnet, "50", 224)).unwrap().totals.params, 25_557_032);
    }

    #[test]
    fn totals_are_row_sums() {
        let r = count_madds(&arch(Family::Botnet, "50", 1024), (1024, 1024)).unwrap();
        assert_eq!(r.totals.madds, r.rows.iter().map(|x| x.madds).sum::<u64>());
        assert_eq!(r.rows.len(), 6);
    }

    #[test]
    fn self_compare_is_zero() {
        let a = arch(Family::Botnet, "50", 224);
        let c = compare(&a, &a, (224, 224)).unwrap();
        assert!(c.rows.iter().all(CompareRow::is_zero));
        assert!(c.totals.is_zero());
    }

    #[test]
    fn compare_rejects_mixed_resolutions() {
        let a = arch(Family::Resnet, "50", 224);
        let r1 = count_madds(&a, (224, 224)).unwrap();
        let r2 = count_madds(&a, (256, 256)).unwrap();
        assert!(compare_reports(&r1, &r2).is_err());
    }

    #[test]
    fn bad_resolution_errors() {
        assert!(count_madds(&arch(Family::Resnet, "50", 224), (100, 100)).is_err());
    }

    #[test]
    fn sci_format() {
        assert_eq!(sci(20.8e6), "20.80x10^6");
        assert_eq!(sci(102.98e9), "102.98x10^9");
    }
}
