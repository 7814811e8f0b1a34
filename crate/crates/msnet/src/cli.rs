//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. All JSON output
//! is canonical (sorted keys), so repeated runs are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::bench::{bench_conv, to_csv, BenchSpec, STAGE_SPECS};
use crate::analysis::cost::count_params_macs;
use crate::analysis::diversity::branch_diversity;
use crate::analysis::erf::{erf_report_seeded, SeededErfConfig};
use crate::arch::{build_model, KernelProtocol, ModelGraph, ModelVariant, Parts};
use crate::checks::{gradient_suite, TOLERANCE};
use crate::error::{Error, Result};
use crate::io::config::{load_config, Precision, ResolvedConfig};
use crate::io::image::{read_ppm, read_raw_f32, write_pgm16};
use crate::io::json::to_canonical_string;
use crate::io::weights::save_weights;
use crate::nn::Mode;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};
use crate::train::{loss_csv, overfit_toy, OverfitConfig};

const USAGE: &str = "msnet <command> [options]

Commands:
  describe     Per-stage summary table (channels, kernels, blocks, params, MACs)
  cost         Full per-layer parameter/MAC report as JSON
  gradcheck    Run the finite-difference gradient suite
  erf          Effective-receptive-field report (JSON, optional PGM dump)
  diversity    Inter-branch feature diversity report (JSON)
  bench        Depthwise+pointwise conv timing table (CSV)
  forward      Run an image through a model and print feature statistics
  overfit      Train the toy overfit task and emit its loss curve (CSV)
  init-weights Write deterministically initialized weights (.msw)

Model selection (describe, cost, erf, diversity, forward, init-weights):
  --config PATH          JSON config file (see docs/config.schema.json)
  --variant xs|s|m       Preset variant (default xs)
  --protocol K,K,K,K     Kernel protocol (default 3,5,7,9)
  --parts P              backbone | backbone+neck | full (default full)
  --seed N               Initialization seed (default 0)
  --precision f32|f64    Element type where applicable (default f32)

Command options:
  describe     [--input-size N] [--json]
  cost         [--input-size N] [--out PATH]
  gradcheck    [--seed N] [--json]
  erf          [--stage 2|3|4] [--inputs N] [--weight-seeds N] [--input-size N]
               [--jobs N] [--out PATH] [--pgm PATH]
  diversity    [--images N] [--image PATH.ppm]... [--input-size N] [--out PATH]
  bench        [--kernels LIST] [--repeats N] [--warmups N] [--seed N] [--csv PATH]
  forward      (--image PATH.ppm | --raw PATH --raw-size HxW) [--mode eval|train] [--json]
  overfit      [--steps N] [--lr X] [--momentum X] [--seed N] [--no-gql] [--csv PATH]
  init-weights --out PATH.msw
";

/// Parsed command-line flags: `--key value` pairs and boolean switches.
struct Flags {
    values: BTreeMap<String, Vec<String>>,
    switches: BTreeSet<String>,
}

impl Flags {
    fn parse(args: &[String], value_keys: &[&str], switch_keys: &[&str]) -> std::result::Result<Self, String> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut switches = BTreeSet::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg.strip_prefix("--").ok_or(format!("unexpected argument `{arg}`"))?;
            if switch_keys.contains(&key) {
                switches.insert(key.to_string());
                i += 1;
            } else if value_keys.contains(&key) {
                let value = args.get(i + 1).ok_or(format!("flag --{key} needs a value"))?;
                values.entry(key.to_string()).or_default().push(value.clone());
                i += 2;
            } else {
                return Err(format!("unknown flag `--{key}`"));
            }
        }
        Ok(Flags { values, switches })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.last()).map(|s| s.as_str())
    }

    fn get_all(&self, key: &str) -> Vec<&str> {
        self.values.get(key).map(|v| v.iter().map(|s| s.as_str()).collect()).unwrap_or_default()
    }

    fn has(&self, key: &str) -> bool {
        self.switches.contains(key)
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text.parse().map_err(|_| Error::InvalidArgument {
                op: "cli",
                detail: format!("invalid value `{text}` for --{key}"),
            }),
        }
    }
}

const MODEL_VALUE_KEYS: [&str; 6] = ["config", "variant", "protocol", "parts", "seed", "precision"];

fn resolve_model(flags: &Flags) -> Result<ResolvedConfig> {
    if let Some(path) = flags.get("config") {
        for key in ["variant", "protocol", "parts"] {
            if flags.get(key).is_some() {
                return Err(Error::Config {
                    detail: format!("--config and --{key} are mutually exclusive"),
                });
            }
        }
        let mut cfg = load_config(Path::new(path))?;
        if let Some(seed) = flags.get("seed") {
            cfg.seed = seed.parse().map_err(|_| Error::Config {
                detail: format!("invalid seed `{seed}`"),
            })?;
        }
        return Ok(cfg);
    }
    let variant = ModelVariant::by_name(flags.get("variant").unwrap_or("xs"))?;
    let protocol = match flags.get("protocol") {
        Some(text) => KernelProtocol::parse(text)?,
        None => KernelProtocol::hks(),
    };
    let parts = Parts::parse(flags.get("parts").unwrap_or("full"))?;
    let seed = flags.parse_num("seed", 0u64)?;
    let precision = Precision::parse(flags.get("precision").unwrap_or("f32"))?;
    Ok(ResolvedConfig { variant, protocol, parts, seed, precision })
}

fn write_or_print(path: Option<&str>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Entry point. `args` excludes the program name.
pub fn run(args: &[String]) -> i32 {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return 0;
    }
    let rest = &args[1..];
    let outcome = match command.as_str() {
        "describe" => cmd_describe(rest),
        "cost" => cmd_cost(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "erf" => cmd_erf(rest),
        "diversity" => cmd_diversity(rest),
        "bench" => cmd_bench(rest),
        "forward" => cmd_forward(rest),
        "overfit" => cmd_overfit(rest),
        "init-weights" => cmd_init_weights(rest),
        other => {
            eprintln!("unknown command `{other}`\n");
            eprint!("{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}\n");
            eprint!("{USAGE}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = std::result::Result<i32, CliError>;

fn parse_flags(args: &[String], value_keys: &[&str], switch_keys: &[&str]) -> std::result::Result<Flags, CliError> {
    Flags::parse(args, value_keys, switch_keys).map_err(CliError::Usage)
}

// ── describe ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DescribeRow {
    region: String,
    out_channels: usize,
    blocks: usize,
    kernel: usize,
    input_size: [usize; 2],
    params: u64,
    macs: u64,
}

#[derive(Serialize)]
struct DescribeReport {
    variant: String,
    widen: f64,
    protocol: String,
    parts: String,
    input_size: [usize; 2],
    rows: Vec<DescribeRow>,
    total_params: u64,
    total_macs: u64,
}

fn describe_report(model: &ModelGraph<f32>, input: (usize, usize)) -> Result<DescribeReport> {
    let cost = count_params_macs(model, input)?;
    let widths = &model.widths;
    let neck_built = model.parts.has_neck();
    let head_built = model.parts.has_head();

    // Aggregate cost per region label.
    let mut by_region: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in &cost.regions {
        let e = by_region.entry(r.region.clone()).or_default();
        e.0 += r.params;
        e.1 += r.macs;
    }
    let look = |label: &str| by_region.get(label).copied().unwrap_or((0, 0));

    let mut rows = Vec::new();
    let (p, m) = look("stem");
    rows.push(DescribeRow {
        region: "stem".into(),
        out_channels: widths.stem,
        blocks: 0,
        kernel: 3,
        input_size: [input.0, input.1],
        params: p,
        macs: m,
    });
    for i in 0..4 {
        let label = format!("stage{}", i + 1);
        let (p, m) = look(&label);
        rows.push(DescribeRow {
            region: label,
            out_channels: widths.stages[i],
            blocks: model.variant.blocks_per_stage[i],
            kernel: model.protocol.stage(i + 1),
            // The stage input: half the previous region's resolution.
            input_size: [input.0 >> (i + 1), input.1 >> (i + 1)],
            params: p,
            macs: m,
        });
    }
    if neck_built {
        for (l, &c) in widths.neck.iter().enumerate() {
            let label = format!("neck.p{}", l + 3);
            let (p, m) = look(&label);
            rows.push(DescribeRow {
                region: label,
                out_channels: c,
                blocks: if l == 1 { 2 } else { 1 },
                kernel: model.protocol.stage(l + 2),
                input_size: [input.0 >> (l + 3), input.1 >> (l + 3)],
                params: p,
                macs: m,
            });
        }
    }
    if head_built {
        for (l, &c) in widths.neck.iter().enumerate() {
            let label = format!("head.p{}", l + 3);
            let (p, m) = look(&label);
            rows.push(DescribeRow {
                region: label,
                out_channels: c,
                blocks: 2,
                kernel: model.protocol.stage(l + 2),
                input_size: [input.0 >> (l + 3), input.1 >> (l + 3)],
                params: p,
                macs: m,
            });
        }
    }
    Ok(DescribeReport {
        variant: model.variant.name.clone(),
        widen: model.variant.widen,
        protocol: model.protocol.to_string(),
        parts: model.parts.name().to_string(),
        input_size: [input.0, input.1],
        rows,
        total_params: cost.total_params,
        total_macs: cost.total_macs,
    })
}

fn cmd_describe(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.push("input-size");
    let flags = parse_flags(args, &keys, &["json"])?;
    let cfg = resolve_model(&flags)?;
    let size: usize = flags.parse_num("input-size", 640)?;
    let model = build_model::<f32>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;
    let report = describe_report(&model, (size, size))?;

    if flags.has("json") {
        print!("{}", to_canonical_string(&report)?);
        return Ok(0);
    }
    println!(
        "variant {} (widen {:.3})  protocol [{}]  parts {}  input {}x{}",
        report.variant, report.widen, report.protocol, report.parts, size, size
    );
    println!(
        "{:<10} {:>8} {:>7} {:>7} {:>12} {:>12} {:>14}",
        "region", "out_ch", "blocks", "kernel", "input", "params", "macs"
    );
    for r in &report.rows {
        println!(
            "{:<10} {:>8} {:>7} {:>7} {:>12} {:>12} {:>14}",
            r.region,
            r.out_channels,
            r.blocks,
            r.kernel,
            format!("{}x{}", r.input_size[0], r.input_size[1]),
            r.params,
            r.macs
        );
    }
    println!(
        "total: {} params ({:.3}M), {} MACs ({:.3}G)",
        report.total_params,
        report.total_params as f64 / 1e6,
        report.total_macs,
        report.total_macs as f64 / 1e9
    );
    Ok(0)
}

// ── cost ────────────────────────────────────────────────────────────────

fn cmd_cost(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.extend(["input-size", "out"]);
    let flags = parse_flags(args, &keys, &[])?;
    let cfg = resolve_model(&flags)?;
    let size: usize = flags.parse_num("input-size", 640)?;
    let model = build_model::<f32>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;
    let report = count_params_macs(&model, (size, size))?;
    write_or_print(flags.get("out"), &to_canonical_string(&report)?)?;
    Ok(0)
}

// ── gradcheck ───────────────────────────────────────────────────────────

#[derive(Serialize)]
struct GradcheckReport {
    seed: u64,
    tolerance: f64,
    cases: Vec<GradcheckCase>,
    max_rel_err: f64,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckCase {
    name: String,
    max_rel_err: f64,
    passed: bool,
}

fn cmd_gradcheck(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["seed"], &["json"])?;
    let seed: u64 = flags.parse_num("seed", 0)?;
    let cases = gradient_suite(seed)?;
    let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let passed = cases.iter().all(|c| c.passed());

    if flags.has("json") {
        let report = GradcheckReport {
            seed,
            tolerance: TOLERANCE,
            cases: cases
                .iter()
                .map(|c| GradcheckCase {
                    name: c.name.clone(),
                    max_rel_err: c.max_rel_err,
                    passed: c.passed(),
                })
                .collect(),
            max_rel_err: worst,
            passed,
        };
        print!("{}", to_canonical_string(&report)?);
    } else {
        for c in &cases {
            println!(
                "{} {:<28} max_rel_err {:.3e}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err
            );
        }
        println!("max relative error: {worst:.3e} (tolerance {TOLERANCE:.0e})");
    }
    Ok(if passed { 0 } else { 1 })
}

// ── erf ─────────────────────────────────────────────────────────────────

fn cmd_erf(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.extend(["stage", "inputs", "weight-seeds", "input-size", "jobs", "out", "pgm"]);
    let flags = parse_flags(args, &keys, &[])?;
    let cfg = resolve_model(&flags)?;
    let stage: usize = flags.parse_num("stage", 4)?;
    let erf_cfg = SeededErfConfig {
        variant: cfg.variant,
        protocol: cfg.protocol,
        stage,
        input_size: flags.parse_num("input-size", 320)?,
        inputs: flags.parse_num("inputs", 2)?,
        weight_seeds: flags.parse_num("weight-seeds", 1)?,
        base_seed: cfg.seed,
        jobs: flags.parse_num("jobs", 1)?,
    };
    let report = erf_report_seeded(&erf_cfg)?;
    if let Some(pgm) = flags.get("pgm") {
        write_pgm16(Path::new(pgm), &report.matrix, report.matrix_size[0], report.matrix_size[1])?;
    }
    write_or_print(flags.get("out"), &to_canonical_string(&report)?)?;
    Ok(0)
}

// ── diversity ───────────────────────────────────────────────────────────

fn cmd_diversity(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.extend(["images", "image", "input-size", "out"]);
    let flags = parse_flags(args, &keys, &[])?;
    let cfg = resolve_model(&flags)?;
    let model = build_model::<f32>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;

    let image_paths = flags.get_all("image");
    let images: Vec<Tensor<f32>> = if image_paths.is_empty() {
        let count: usize = flags.parse_num("images", 4)?;
        let size: usize = flags.parse_num("input-size", 320)?;
        (0..count)
            .map(|i| {
                let mut rng = Rng::derive(cfg.seed, &format!("diversity.image{i}"));
                Tensor::randn(&[1, 3, size, size], &mut rng)
            })
            .collect::<Result<_>>()?
    } else {
        image_paths
            .iter()
            .map(|p| read_ppm(Path::new(p)))
            .collect::<Result<_>>()?
    };

    let report = branch_diversity(&model, &images)?;
    write_or_print(flags.get("out"), &to_canonical_string(&report)?)?;
    Ok(0)
}

// ── bench ───────────────────────────────────────────────────────────────

fn cmd_bench(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["kernels", "repeats", "warmups", "seed", "csv"], &[])?;
    let kernels: Vec<usize> = match flags.get("kernels") {
        None => vec![3, 5, 7, 9],
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim().parse().map_err(|_| Error::InvalidArgument {
                    op: "cli",
                    detail: format!("invalid kernel `{t}`"),
                })
            })
            .collect::<Result<_>>()?,
    };
    let repeats: usize = flags.parse_num("repeats", 100)?;
    let warmups: usize = flags.parse_num("warmups", 10)?;
    let seed: u64 = flags.parse_num("seed", 0)?;
    let specs: Vec<BenchSpec> = STAGE_SPECS.to_vec();
    let cells = bench_conv(&specs, &kernels, repeats, warmups, seed)?;
    write_or_print(flags.get("csv"), &to_csv(&cells))?;
    Ok(0)
}

// ── forward ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct TapStats {
    name: String,
    shape: Vec<usize>,
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

fn tap_stats<T: Element>(name: &str, t: &Tensor<T>) -> TapStats {
    let s = t.stats();
    TapStats {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        min: s.min,
        max: s.max,
        mean: s.mean,
        std: s.std,
    }
}

fn forward_stats<T: Element>(
    cfg: &ResolvedConfig,
    image_f32: &Tensor<f32>,
    mode: Mode,
) -> Result<Vec<TapStats>> {
    let model = build_model::<T>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;
    let data: Vec<T> = image_f32.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    let image = Tensor::from_vec(image_f32.shape(), data)?;
    let feats = model.forward_features(&image, mode)?;
    let mut stats = Vec::new();
    for (i, t) in feats.stages.iter().enumerate() {
        stats.push(tap_stats(&format!("backbone.stage{}", i + 1), t));
    }
    if let Some(neck) = &feats.neck {
        for (i, t) in neck.iter().enumerate() {
            stats.push(tap_stats(&format!("neck.p{}", i + 3), t));
        }
    }
    if let Some(head) = &feats.head {
        for (i, t) in head.iter().enumerate() {
            stats.push(tap_stats(&format!("head.p{}", i + 3), t));
        }
    }
    Ok(stats)
}

fn cmd_forward(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.extend(["image", "raw", "raw-size", "mode"]);
    let flags = parse_flags(args, &keys, &["json"])?;
    let cfg = resolve_model(&flags)?;

    let image = match (flags.get("image"), flags.get("raw")) {
        (Some(p), None) => read_ppm(Path::new(p))?,
        (None, Some(p)) => {
            let size = flags
                .get("raw-size")
                .ok_or_else(|| CliError::Usage("--raw needs --raw-size HxW".into()))?;
            let (h, w) = parse_hw(size).map_err(CliError::Usage)?;
            read_raw_f32(Path::new(p), h, w)?
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--image and --raw are mutually exclusive".into()))
        }
        (None, None) => return Err(CliError::Usage("forward needs --image or --raw".into())),
    };
    let mode = match flags.get("mode").unwrap_or("eval") {
        "eval" => Mode::Eval,
        "train" => Mode::Train,
        other => return Err(CliError::Usage(format!("unknown mode `{other}`"))),
    };
    let stats = match cfg.precision {
        Precision::F32 => forward_stats::<f32>(&cfg, &image, mode)?,
        Precision::F64 => forward_stats::<f64>(&cfg, &image, mode)?,
    };
    if flags.has("json") {
        print!("{}", to_canonical_string(&stats)?);
    } else {
        for s in &stats {
            println!(
                "{:<18} {:?} mean={:.6} std={:.6} min={:.6} max={:.6}",
                s.name, s.shape, s.mean, s.std, s.min, s.max
            );
        }
    }
    Ok(0)
}

fn parse_hw(text: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = text.split_once('x').ok_or(format!("expected HxW, got `{text}`"))?;
    let h = h.parse().map_err(|_| format!("invalid height `{h}`"))?;
    let w = w.parse().map_err(|_| format!("invalid width `{w}`"))?;
    Ok((h, w))
}

// ── overfit ─────────────────────────────────────────────────────────────

fn cmd_overfit(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["steps", "lr", "momentum", "seed", "csv"], &["no-gql"])?;
    let cfg = OverfitConfig {
        steps: flags.parse_num("steps", 500)?,
        lr: flags.parse_num("lr", 0.02)?,
        momentum: flags.parse_num("momentum", 0.9)?,
        seed: flags.parse_num("seed", 0)?,
        gql: !flags.has("no-gql"),
    };
    let report = overfit_toy(&cfg)?;
    eprintln!(
        "initial loss {:.6e}, final loss {:.6e} after {} steps (ratio {:.4})",
        report.initial_loss,
        report.final_loss,
        report.steps_run,
        report.final_loss / report.initial_loss
    );
    write_or_print(flags.get("csv"), &loss_csv(&report))?;
    Ok(0)
}

// ── init-weights ────────────────────────────────────────────────────────

fn cmd_init_weights(args: &[String]) -> CliResult {
    let mut keys = MODEL_VALUE_KEYS.to_vec();
    keys.push("out");
    let flags = parse_flags(args, &keys, &[])?;
    let cfg = resolve_model(&flags)?;
    let out = flags
        .get("out")
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage("init-weights needs --out PATH".into()))?;
    match cfg.precision {
        Precision::F32 => {
            let model = build_model::<f32>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;
            save_weights(&model, &out)?;
        }
        Precision::F64 => {
            let model = build_model::<f64>(&cfg.variant, cfg.protocol, cfg.parts, cfg.seed)?;
            save_weights(&model, &out)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(0)
}
