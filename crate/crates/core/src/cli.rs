//! The `xres` command line: dataset generation, training, evaluation,
//! parameter accounting, gradient checks and cross-weight dumps.
//!
//! Exit codes: 0 success, 1 check failed, 2 configuration error, 3 I/O or
//! file-format error, 4 non-finite loss.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{count_params, he_init, ArchSpec, Network, Variant};
use crate::checkpoint;
use crate::config::{key_help, RunConfig};
use crate::data::{generate, split, Dataset, TASK_NAMES};
use crate::error::Error;
use crate::tensor::{GradCheckOptions, Tensor};
use crate::train::{self, dump_cross_weights, evaluate, gradcheck_network, MetricsRecord, Outputs};

pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NAN: i32 = 4;

/// Environment variable fixing the worker-thread count.
pub const THREADS_ENV: &str = "XRES_THREADS";

#[derive(Parser, Debug)]
#[command(name = "xres", version, about = "Cross-residual multitask networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset described by the [data] section.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides [data] seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset file, writing metrics.csv, best.ckpt and last.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides [train] seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print each evaluation row to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Per-task top-1/top-5 of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// test, train or all samples.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        /// Print a metrics-CSV row instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Parameter counts per group.
    Params {
        #[command(flatten)]
        arch: ArchArgs,
        /// Expected total; a mismatch beyond --tol exits 1.
        #[arg(long)]
        expect: Option<f64>,
        /// Relative tolerance for --expect, e.g. 0.005 or 0.5%.
        #[arg(long, default_value = "0")]
        tol: String,
    },
    /// Central finite-difference check of every network gradient in f64.
    Gradcheck {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Input side; overrides the architecture's input size.
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Entries checked per tensor, 0 for all.
        #[arg(long, default_value_t = 6)]
        entries: usize,
    },
    /// Sorted channel-scale cross weights of a checkpoint as CSV.
    DumpWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ArchArgs {
    /// resnet50, resnet50-multitask, mini, or a config file.
    #[arg(long, default_value = "mini")]
    arch: String,
    #[arg(long)]
    variant: Option<String>,
    /// Classes of a single head (resnet50 only).
    #[arg(long)]
    classes: Option<usize>,
    /// Comma list of name:classes.
    #[arg(long)]
    heads: Option<String>,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format { .. } | Error::Truncated { .. } => EXIT_IO,
            Error::NonFinite { .. } => EXIT_NAN,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        fail(EXIT_IO, e.to_string())
    }
}

type Outcome = std::result::Result<String, Failure>;

/// Worker threads from `XRES_THREADS` (default 1). Results are bitwise
/// stable for a fixed setting; the kernels read the same variable.
pub fn threads() -> std::result::Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(fail(EXIT_CONFIG, format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

fn read_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(EXIT_IO, format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", p.display())))
        }
    }
}

fn parse_heads(v: &str) -> std::result::Result<Vec<(String, usize)>, Failure> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|h| {
            let (n, k) = h
                .split_once(':')
                .ok_or_else(|| fail(EXIT_CONFIG, format!("head '{h}' is not name:classes")))?;
            let k = k
                .trim()
                .parse()
                .map_err(|_| fail(EXIT_CONFIG, format!("head '{h}': bad class count")))?;
            Ok((n.trim().to_string(), k))
        })
        .collect()
}

fn resolve_arch(a: &ArchArgs) -> std::result::Result<(ArchSpec, Variant), Failure> {
    let as_file = Path::new(&a.arch);
    let (mut spec, mut variant) = match a.arch.as_str() {
        "resnet50" => (ArchSpec::resnet50(&[("task", a.classes.unwrap_or(1000))]), Variant::X0),
        "resnet50-multitask" => (
            ArchSpec::resnet50_multitask(&[("adjective", 117), ("noun", 167), ("pair", 553)]),
            Variant::X0,
        ),
        "mini" => (ArchSpec::mini(&ArchSpec::synthetic_heads(6, 8, 24)), Variant::Xs),
        _ if as_file.exists() => {
            let cfg = read_config(Some(as_file))?;
            (cfg.arch, cfg.variant)
        }
        other => return Err(fail(EXIT_CONFIG, format!("unknown architecture '{other}'"))),
    };
    if a.classes.is_some() && a.arch != "resnet50" {
        return Err(fail(EXIT_CONFIG, "--classes applies to --arch resnet50 only"));
    }
    if let Some(h) = &a.heads {
        let heads = parse_heads(h)?;
        let list: Vec<(&str, usize)> = heads.iter().map(|(n, k)| (n.as_str(), *k)).collect();
        spec.heads = ArchSpec::mini(&list).heads;
    }
    if let Some(v) = &a.variant {
        variant = Variant::parse(v).ok_or_else(|| fail(EXIT_CONFIG, format!("unknown variant '{v}'")))?;
    }
    spec.validate()?;
    Ok((spec, variant))
}

fn parse_tol(s: &str) -> std::result::Result<f64, Failure> {
    let (body, scale) = match s.trim().strip_suffix('%') {
        Some(b) => (b, 0.01),
        None => (s.trim(), 1.0),
    };
    match body.parse::<f64>() {
        Ok(v) if v >= 0.0 => Ok(v * scale),
        _ => Err(fail(EXIT_CONFIG, format!("bad tolerance '{s}'"))),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Outcome {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let ds = generate(&cfg.data)?;
    ds.save(out)?;
    let mut report = format!(
        "seed={} image_size={} samples={} adjectives={} nouns={} pairs={}\n",
        ds.seed,
        ds.image_size,
        ds.len(),
        ds.adjectives.len(),
        ds.nouns.len(),
        ds.pairs.len()
    );
    let _ = writeln!(report, "{:>4}  {:<10} {:<10} {:>7}", "pair", "adjective", "noun", "images");
    for (p, (&(a, n), count)) in ds.pairs.iter().zip(ds.pair_counts()).enumerate() {
        let _ = writeln!(
            report,
            "{p:>4}  {:<10} {:<10} {count:>7}",
            ds.adjectives[a as usize], ds.nouns[n as usize]
        );
    }
    let _ = writeln!(report, "wrote {}", out.display());
    Ok(report)
}

/// Heads named after dataset tasks take their class counts from the data.
fn fit_heads(spec: &mut ArchSpec, ds: &Dataset) {
    let counts = ds.class_counts();
    for h in &mut spec.heads {
        if let Some(t) = TASK_NAMES.iter().position(|&n| n == h.name) {
            h.classes = counts[t];
        }
    }
}

fn train_cmd(config: Option<&Path>, data: &Path, out_dir: &Path, seed: Option<u64>, verbose: bool) -> Outcome {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let ds = Dataset::load(data)?;
    fit_heads(&mut cfg.arch, &ds);
    let sp = split(&ds, cfg.split_seed)?;
    let mut net = Network::<f32>::build(&cfg.arch, cfg.variant)?;
    he_init(&mut net, cfg.train.seed);
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("config.txt"),
        format!("# xres run config seed={}\n{}", cfg.train.seed, cfg.serialize()),
    )?;
    let outputs = Outputs {
        dir: Some(out_dir.to_path_buf()),
        verbose,
    };
    let report = train::train(&mut net, &ds, &sp.train, &sp.test, &cfg.train, &cfg.eval, &outputs)?;
    let tasks: Vec<String> = net.spec().heads.iter().map(|h| h.name.clone()).collect();
    let last = report.records.last().expect("final evaluation");
    Ok(format!(
        "seed={} threads={} steps={} best_step={} stopped_early={}\n{}\n{}\nwrote {}\n",
        cfg.train.seed,
        threads()?,
        report.steps,
        report.best_step,
        report.stopped_early,
        MetricsRecord::csv_header(&tasks),
        last.csv_row(),
        out_dir.display()
    ))
}

fn eval_cmd(ckpt: &Path, data: &Path, split_seed: u64, which: &str, batch: usize, csv: bool) -> Outcome {
    let (mut net, seed) = checkpoint::load::<f32>(ckpt)?;
    let ds = Dataset::load(data)?;
    let sp = split(&ds, split_seed)?;
    let indices: Vec<usize> = match which {
        "test" => sp.test,
        "train" => sp.train,
        "all" => (0..ds.len()).collect(),
        other => return Err(fail(EXIT_CONFIG, format!("unknown split '{other}'"))),
    };
    if batch == 0 {
        return Err(fail(EXIT_CONFIG, "--batch-size must be positive"));
    }
    let (total, loss, top1, top5) = evaluate(&mut net, &ds, &indices, batch)?;
    let heads = &net.spec().heads;
    if csv {
        let mut header = String::from("loss_total");
        let mut row = format!("{total}");
        for (prefix, values) in [("loss", &loss), ("top1", &top1), ("top5", &top5)] {
            for (h, v) in heads.iter().zip(values.iter()) {
                let _ = write!(header, ",{prefix}_{}", h.name);
                let _ = write!(row, ",{v}");
            }
        }
        return Ok(format!("# seed={seed}\n{header}\n{row}\n"));
    }
    let mut out = format!(
        "seed={seed} split={which} samples={} variant={}\n{:<12} {:>7} {:>8} {:>8} {:>8}\n",
        indices.len(),
        net.variant(),
        "task",
        "classes",
        "top-1",
        "top-5",
        "loss"
    );
    for (t, h) in heads.iter().enumerate() {
        let _ = writeln!(out, "{:<12} {:>7} {:>8.2} {:>8.2} {:>8.4}", h.name, h.classes, top1[t], top5[t], loss[t]);
    }
    let _ = writeln!(out, "{:<12} {:>7} {:>8} {:>8} {:>8.4}", "total", "", "", "", total);
    Ok(out)
}

fn params_cmd(a: &ArchArgs, expect: Option<f64>, tol: &str) -> Outcome {
    let (spec, variant) = resolve_arch(a)?;
    let tol = parse_tol(tol)?;
    let net = Network::<f32>::build(&spec, variant)?;
    let total = count_params(&net);
    let mut out = format!("arch={} variant={variant}\n{:<12} {:>12}\n", a.arch, "group", "params");
    for (group, n) in net.params().breakdown() {
        let _ = writeln!(out, "{group:<12} {n:>12}");
    }
    let _ = writeln!(out, "{:<12} {total:>12}\ntotal_millions {:.2}", "total", total as f64 / 1e6);
    if let Some(e) = expect {
        let rel = (total as f64 - e).abs() / e.abs().max(1.0);
        if rel > tol {
            return Err(fail(
                EXIT_CHECK,
                format!("{out}check failed: {total} differs from expected {e} by {:.4}% (tolerance {:.4}%)", rel * 100.0, tol * 100.0),
            ));
        }
        let _ = writeln!(out, "check passed: within {:.4}% of {e}", tol * 100.0);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn gradcheck_cmd(a: &ArchArgs, eps: f64, threshold: f64, seed: u64, batch: usize, size: usize, entries: usize) -> Outcome {
    let (mut spec, variant) = resolve_arch(a)?;
    if !(eps > 0.0) || batch < 2 {
        return Err(fail(EXIT_CONFIG, "--eps must be positive and --batch at least 2"));
    }
    spec.input_size = size;
    let mut net = Network::<f64>::build(&spec, variant)?;
    he_init(&mut net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let images = Tensor::from_fn([batch, spec.in_channels, size, size], |_| rng.random_range(0.0..1.0));
    let labels: Vec<Vec<usize>> = spec
        .heads
        .iter()
        .map(|h| (0..batch).map(|_| rng.random_range(0..h.classes)).collect())
        .collect();
    let opts = GradCheckOptions {
        step: eps,
        max_entries_per_tensor: (entries > 0).then_some(entries),
        ..Default::default()
    };
    let check = gradcheck_network(&net, &images, &labels, &opts)?;
    let err = check.max_rel_error();
    let mut out = format!(
        "seed={seed} variant={variant} tensors={} entries={} refined={} kinked={} eps={eps:e}\nmax_rel_error {err:e}\n",
        net.params().len(),
        check.entries_checked(),
        check.entries_refined(),
        check.entries_kinked()
    );
    if let Some((name, e)) = check.worst() {
        let _ = writeln!(out, "worst {name} {e:e}");
    }
    for z in check.structural_zeros() {
        let _ = writeln!(out, "structural_zero {z}");
    }
    if !(err < threshold) {
        return Err(fail(EXIT_CHECK, format!("{out}check failed: {err:e} >= {threshold:e}")));
    }
    let _ = writeln!(out, "check passed: below {threshold:e}");
    Ok(out)
}

fn dump_cmd(ckpt: &Path, out: Option<&Path>) -> Outcome {
    let (net, seed) = checkpoint::load::<f32>(ckpt)?;
    let dump = dump_cross_weights(&net);
    let csv = dump.to_csv(seed);
    let mut msg = String::new();
    if let Some(w) = &dump.warning {
        eprintln!("warning: {w}");
    }
    match out {
        Some(p) => {
            fs::write(p, &csv)?;
            let _ = writeln!(
                msg,
                "seed={seed} rows={} nonnegative={:.3}\nwrote {}",
                dump.rows.len(),
                dump.nonnegative_fraction(),
                p.display()
            );
        }
        None => msg = csv,
    }
    Ok(msg)
}

fn dispatch(cli: Cli) -> Outcome {
    threads()?;
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out_dir,
            seed,
            verbose,
        } => train_cmd(config.as_deref(), &data, &out_dir, seed, verbose),
        Command::Eval {
            checkpoint,
            data,
            split_seed,
            split,
            batch_size,
            csv,
        } => eval_cmd(&checkpoint, &data, split_seed, &split, batch_size, csv),
        Command::Params { arch, expect, tol } => params_cmd(&arch, expect, &tol),
        Command::Gradcheck {
            arch,
            eps,
            threshold,
            seed,
            batch,
            size,
            entries,
        } => gradcheck_cmd(&arch, eps, threshold, seed, batch, size, entries),
        Command::DumpWeights { checkpoint, out } => dump_cmd(&checkpoint, out.as_deref()),
    }
}

/// Runs the command line and returns `(exit code, stdout, stderr)`.
pub fn run_captured<I, S>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let command = Cli::command().after_help(key_help());
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            return (code, if code == 0 { e.to_string() } else { String::new() }, if code == 0 { String::new() } else { e.to_string() });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return (EXIT_CONFIG, String::new(), e.to_string()),
    };
    match dispatch(cli) {
        Ok(out) => (0, out, String::new()),
        Err(f) => (f.code, String::new(), format!("error: {}\n", f.message)),
    }
}

/// Runs the command line, printing to stdout/stderr; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let (code, out, err) = run_captured(args);
    print!("{out}");
    eprint!("{err}");
    code
}
