//! `botkit` command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure (or a failed verify suite),
//! 2 invalid input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use botkit::attention::PosMode;
use botkit::backbone::{build_backbone, forward_classifier, ArchSpec, BuildOptions, Family, ModelParams, ReplacementConfig};
use botkit::cost::{self, compare, describe_table, DETECTION_REFERENCE_MADDS};
use botkit::io::{load_tensor, save_tensor, ParamArchive};
use botkit::rng::ParamRng;
use botkit::verify::{run_suite, MatrixEntry, Suite};
use botkit::{Activation, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "botkit", version, about = "Bottleneck Transformer toolkit: build, cost, verify and run backbones")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the stage table (shapes, block kinds, params, M.Adds) of an architecture.
    Describe {
        /// ArchSpec JSON file or shorthand such as `botnet-50`
        spec: Option<String>,
        #[command(flatten)]
        arch: ArchFlags,
        /// Write the ArchSpec JSON here
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the CostReport JSON here
        #[arg(long)]
        cost_json: Option<PathBuf>,
    },
    /// Per-stage parameter and M.Adds deltas (a - b).
    Compare {
        spec_a: String,
        spec_b: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run a verification suite and print the VerifyReport JSON.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON list of {family, depth, res} entries replacing the default invariants matrix
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Forward a tensor through a classifier with seeded or loaded parameters.
    Infer {
        /// ArchSpec JSON file or shorthand such as `botnet-50`
        spec: String,
        /// Seeds parameter init (unless --params is given) and --random input
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter archive (.botp) to load instead of seeding
        #[arg(long)]
        params: Option<PathBuf>,
        /// Input tensor (.botk)
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        input: Option<PathBuf>,
        /// Random input of shape NxCxHxW drawn from the seed
        #[arg(long)]
        random: Option<String>,
        #[arg(long)]
        output: PathBuf,
        /// Architecture resolution for shorthand specs (defaults to the input size)
        #[arg(long)]
        res: Option<usize>,
        #[arg(long, default_value_t = 1)]
        width_divisor: usize,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        dtype: Precision,
        /// Also write the generated parameters to this archive
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct ArchFlags {
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    /// c5 replacement flags, e.g. 0,1,1
    #[arg(long)]
    replacement: Option<String>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    pos_mode: Option<String>,
    #[arg(long)]
    se_ratio: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Non-Local insertion as group:position (position defaults to before the last block)
    #[arg(long)]
    nl: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let invalid = err.chain().any(|c| {
            c.downcast_ref::<botkit::Error>().is_some_and(|e| e.is_invalid_input())
                || c.is::<std::io::Error>()
                || c.is::<serde_json::Error>()
                || c.is::<InvalidInput>()
        });
        Failure {
            code: if invalid { 2 } else { 1 },
            err,
        }
    }
}

impl From<botkit::Error> for Failure {
    fn from(e: botkit::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

// A closed downstream pipe (`| head`) is not an error worth a panic.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match configure_threads().and_then(|_| run(cli)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            f.code
        }
    };
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("BOTKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("BOTKIT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Describe {
            spec,
            arch,
            json,
            cost_json,
        } => {
            let arch = resolve_arch(spec.as_deref(), &arch, None)?;
            let table = describe_table(&arch)?;
            if let Some(path) = json {
                write(&path, arch.to_json()?)?;
            }
            if let Some(path) = cost_json {
                write(&path, cost::count_params(&arch)?.to_json()?)?;
            }
            out!("{table}");
            for (name, madds) in DETECTION_REFERENCE_MADDS {
                if name == arch.name {
                    outln!(
                        "reference: {name} detection-context M.Adds {} (includes components not modelled here)",
                        cost::sci(madds)
                    );
                }
            }
            Ok(0)
        }
        Cmd::Compare {
            spec_a,
            spec_b,
            res,
            format,
        } => {
            let flags = ArchFlags {
                res,
                ..Default::default()
            };
            let a = resolve_arch(Some(&spec_a), &flags, None)?;
            let b = resolve_arch(Some(&spec_b), &flags, None)?;
            let res = res.map_or(a.input_res, |r| (r, r));
            let report = compare(&a, &b, res)?;
            match format {
                Format::Text => out!("{}", report.to_table()),
                Format::Json => outln!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
            }
            Ok(0)
        }
        Cmd::Verify { suite, seed, matrix } => {
            let suite: Suite = suite.parse()?;
            let matrix: Option<Vec<MatrixEntry>> = match matrix {
                Some(path) => Some(serde_json::from_str(&read(&path)?).map_err(anyhow::Error::from)?),
                None => None,
            };
            let report = run_suite(suite, seed, matrix.as_deref())?;
            outln!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
            for row in report.failures() {
                eprintln!("FAIL {} measured {:e} > {:e}", row.name, row.measured, row.threshold);
            }
            Ok(if report.pass { 0 } else { 1 })
        }
        Cmd::Infer {
            spec,
            seed,
            params,
            input,
            random,
            output,
            res,
            width_divisor,
            dtype,
            save_params,
        } => {
            let req = InferRequest {
                spec,
                seed: seed.unwrap_or(0),
                params,
                input,
                random,
                output,
                res,
                width_divisor,
                save_params,
            };
            match dtype {
                Precision::F32 => infer::<f32>(&req),
                Precision::F64 => infer::<f64>(&req),
            }
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, s: String) -> anyhow::Result<()> {
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Splits `botnet_s1-S1-59` / `botnet-50` into family and depth.
fn parse_shorthand(s: &str) -> anyhow::Result<(Family, String)> {
    for family in ["botnet_s1", "botnet-s1", "resnet", "botnet", "senet"] {
        if let Some(rest) = s.strip_prefix(family).and_then(|r| r.strip_prefix('-')) {
            return Ok((family.parse()?, rest.to_string()));
        }
    }
    Err(invalid(format!(
        "{s:?} is neither a JSON file nor a family-depth shorthand like botnet-50"
    )))
}

/// Builds the architecture from a JSON file, a shorthand, or flags.
/// `default_res` applies to non-JSON specs when `--res` is absent.
fn resolve_arch(spec: Option<&str>, f: &ArchFlags, default_res: Option<usize>) -> anyhow::Result<ArchSpec> {
    if let Some(s) = spec {
        if Path::new(s).is_file() {
            return Ok(ArchSpec::from_json(&read(Path::new(s))?)?);
        }
    }
    let (family, depth) = match (spec, &f.family, &f.depth) {
        (Some(s), None, None) => parse_shorthand(s)?,
        (None, Some(fam), Some(d)) => (fam.parse()?, d.clone()),
        (None, Some(fam), None) => (fam.parse()?, "50".into()),
        _ => return Err(invalid("give either a spec or --family/--depth")),
    };
    let res = f.res.or(default_res).unwrap_or(224);
    let mut opts = BuildOptions::at(res);
    if let Some(r) = &f.replacement {
        opts.replacement = Some(ReplacementConfig::parse_flags(r)?);
    }
    if let Some(h) = f.heads {
        opts.heads = h;
    }
    if let Some(p) = &f.pos_mode {
        opts.pos_mode = p.parse::<PosMode>()?;
    }
    if f.se_ratio.is_some() {
        opts.se_ratio = f.se_ratio;
    }
    if let Some(a) = &f.activation {
        opts.activation = a.parse::<Activation>().map_err(|e| invalid(format!("{e}")))?;
    }
    if let Some(d) = f.width_divisor {
        opts.width_divisor = d;
    }
    if let Some(c) = f.classes {
        opts.n_classes = (c > 0).then_some(c);
    }
    let named = botkit::backbone::named_blockgroups(family, &depth)?;
    for spec in &f.nl {
        let (g, p) = match spec.split_once(':') {
            Some((g, p)) => (g, Some(p)),
            None => (spec.as_str(), None),
        };
        let group: usize = g
            .trim_start_matches('c')
            .parse()
            .map_err(|_| invalid(format!("bad NL group {g:?}")))?;
        if !(2..=5).contains(&group) {
            return Err(invalid(format!("NL group must be c2..c5, got {g:?}")));
        }
        let pos = match p {
            Some(p) => p.parse().map_err(|_| invalid(format!("bad NL position {p:?}")))?,
            None => botkit::backbone::default_nl_position(&named, group),
        };
        opts.nl_insertions.push((group, pos));
    }
    Ok(build_backbone(family, &depth, &opts)?)
}

struct InferRequest {
    spec: String,
    seed: u64,
    params: Option<PathBuf>,
    input: Option<PathBuf>,
    random: Option<String>,
    output: PathBuf,
    res: Option<usize>,
    width_divisor: usize,
    save_params: Option<PathBuf>,
}

fn parse_dims(s: &str) -> anyhow::Result<Vec<usize>> {
    let dims = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| invalid(format!("bad shape {s:?}, expected NxCxHxW")))?;
    if dims.len() != 4 || dims.contains(&0) {
        return Err(invalid(format!("shape {s:?} must have four positive extents")));
    }
    Ok(dims)
}

fn infer<T: botkit::Scalar>(req: &InferRequest) -> Result<u8, Failure> {
    let x: Tensor<T> = match (&req.input, &req.random) {
        (Some(path), None) => load_tensor(path)?.into_dtype(),
        (None, Some(shape)) => {
            let dims = parse_dims(shape)?;
            // inputs use their own stream so they do not alias parameter draws
            ParamRng::new(req.seed ^ 0x5eed_1a7e_0000_0001).normal(&dims, 1.0)
        }
        _ => return Err(invalid("give exactly one of --input or --random").into()),
    };
    if x.rank() != 4 {
        return Err(invalid(format!("input must be NCHW, got shape {:?}", x.shape())).into());
    }
    let flags = ArchFlags {
        res: req.res,
        width_divisor: Some(req.width_divisor),
        ..Default::default()
    };
    let default_res = (x.shape()[2] == x.shape()[3]).then_some(x.shape()[2]);
    let arch = resolve_arch(Some(&req.spec), &flags, default_res)?;
    let params = match &req.params {
        Some(path) => ModelParams::from_archive(&arch, &ParamArchive::<T>::load(path)?)?,
        None => ModelParams::init(&arch, req.seed)?,
    };
    if let Some(path) = &req.save_params {
        params.to_archive().save(path)?;
    }
    let out = forward_classifier(&arch, &params, &x)?;
    save_tensor(&req.output, &out.logits)?;

    let v: Vec<f64> = out.logits.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let argmax = botkit::ops::argmax_last(&out.logits);
    let summary = json!({
        "arch": arch.name,
        "input_shape": x.shape(),
        "output_shape": out.logits.shape(),
        "dtype": format!("{:?}", T::DTYPE).to_lowercase(),
        "stages": out.stages,
        "mean": mean,
        "std": var.sqrt(),
        "min": v.iter().cloned().fold(f64::INFINITY, f64::min),
        "max": v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "argmax": argmax,
        "all_finite": out.logits.all_finite(),
        "output": req.output.display().to_string(),
    });
    outln!("{}", serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?);
    if !out.logits.all_finite() {
        return Err(anyhow!("output contains non-finite values").into());
    }
    Ok(0)
}
