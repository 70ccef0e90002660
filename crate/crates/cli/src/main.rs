//! `dmsa`: describe network costs, run traced forwards, verify gradients,
//! train the toy classifier, benchmark, and manage weight files.
//!
//! Exit codes: 0 success, 1 failed check or diverged run, 2 configuration
//! error, 3 shape mismatch, 4 I/O error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::NetConfigFile;
use dmsa_core::cost::{cost_report, gap_percent, Convention};
use dmsa_core::dataset::make_synthetic_dataset;
use dmsa_core::error::{Error, Result};
use dmsa_core::gradcheck::{
    run_block_check, run_network_check, run_op_checks, GradCheckReport,
};
use dmsa_core::init::{normal_tensor, seeded_rng};
use dmsa_core::network::{forward_traced, NetKind, NetParams};
use dmsa_core::par::set_threads;
use dmsa_core::scalar::Element;
use dmsa_core::serialize::{load_weights, save_weights};
use dmsa_core::tensor::Tensor;
use dmsa_core::train::{records_to_csv, train_toy, ToyParams, TrainConfig};

#[derive(Parser)]
#[command(name = "dmsa", version, about = "Dual multi-scale attention networks: costs, forwards, checks, toys")]
struct Cli {
    /// JSON network config; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for the heavy kernels (results are bit-identical for
    /// any count)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective config, the per-layer cost table, and totals
    Describe {
        /// Input resolution for the flop accounting
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        /// Parameter-count target to gap against (e.g. 26.25e6); defaults to
        /// the published row for the configured depth and kind
        #[arg(long)]
        against: Option<f64>,
    },
    /// Run one forward pass and print per-stage activations
    Forward {
        /// Seed for parameters and the random input
        #[arg(long)]
        seed: Option<u64>,
        /// Weight file to load instead of seeded initialization
        #[arg(long)]
        weights: Option<PathBuf>,
        /// "random" or a weight file whose first record is the input tensor
        #[arg(long, default_value = "random")]
        input: String,
        /// Also print mean/std/min/max per stage
        #[arg(long)]
        stats: bool,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Verify analytic gradients against central differences
    Gradcheck {
        /// op, block, network, or all
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Test hook: corrupt the named block parameter's gradient and prove
        /// the check catches it
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Train the toy blob classifier and optionally write the loss-curve CSV
    TrainToy {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        resolution: usize,
        /// CSV output path (epoch, train_loss, test_loss, test_accuracy)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time full forward passes and report median and p95
    Bench {
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 56)]
        resolution: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write initialized (or re-encoded) network weights to a file
    SaveWeights {
        #[arg(long)]
        out: PathBuf,
        /// Re-encode this weight file instead of initializing from the seed
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// f32 or f64
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownVariant(_) => 2,
        Error::ShapeMismatch(_) | Error::InvalidGroups(_) => 3,
        Error::Io(_) | Error::CorruptWeights(_) => 4,
        Error::NonFiniteObjective(_) | Error::DivergenceDetected(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    set_threads(cli.threads);
    let cfg = match &cli.config {
        Some(path) => match NetConfigFile::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                std::process::exit(2);
            }
        },
        None => NetConfigFile::default(),
    };
    match run(&cli, &cfg) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn run(cli: &Cli, cfg: &NetConfigFile) -> Result<i32> {
    match &cli.cmd {
        Cmd::Describe { resolution, against } => describe(cfg, *resolution, *against),
        Cmd::Forward { seed, weights, input, stats, resolution } => forward(
            cfg,
            seed.unwrap_or(cfg.seed),
            weights.as_deref(),
            input,
            *stats,
            *resolution,
        ),
        Cmd::Gradcheck { scope, seed, corrupt } => {
            gradcheck(scope, seed.unwrap_or(1), corrupt.as_deref())
        }
        Cmd::TrainToy { seed, epochs, samples, resolution, out } => toy(
            seed.unwrap_or(cfg.seed),
            *epochs,
            *samples,
            *resolution,
            out.as_deref(),
        ),
        Cmd::Bench { iters, resolution, seed } => {
            bench(cfg, *iters, *resolution, seed.unwrap_or(cfg.seed))
        }
        Cmd::SaveWeights { out, from, seed, dtype } => save(
            cfg,
            out,
            from.as_deref(),
            seed.unwrap_or(cfg.seed),
            dtype,
        ),
    }
}

/// Published cost rows (params, flops at 224) per (depth, kind).
fn published_row(depth: usize, kind: NetKind) -> Option<(f64, f64)> {
    match (depth, kind) {
        (50, NetKind::Plain) => Some((25.56e6, 4.12e9)),
        (101, NetKind::Plain) => Some((44.55e6, 7.85e9)),
        (50, NetKind::Dmsa) => Some((26.25e6, 3.44e9)),
        (101, NetKind::Dmsa) => Some((42.29e6, 7.11e9)),
        _ => None,
    }
}

fn describe(cfg: &NetConfigFile, resolution: usize, against: Option<f64>) -> Result<i32> {
    let kind = cfg.kind()?;
    let net = cfg.build()?;
    let report = cost_report(&net, resolution, Convention::default())?;

    println!("network: {}-{} at {resolution}x{resolution}", kind.name(), cfg.depth);
    println!("config:");
    for line in cfg.echo().lines() {
        println!("  {line}");
    }
    println!();
    println!("{:<30} {:>14} {:>16}", "layer", "params", "flops");
    for layer in &report.layers {
        println!("{:<30} {:>14} {:>16}", layer.name, layer.params, layer.flops);
    }
    println!(
        "totals: {} params ({:.2}M), {} flops ({:.2}G)",
        report.total_params,
        report.total_params as f64 / 1e6,
        report.total_flops,
        report.total_flops as f64 / 1e9
    );
    let row = published_row(cfg.depth, kind);
    if let Some(target) = against.or(row.map(|(p, _)| p)) {
        println!(
            "params gap: {:+.4}% vs {:.2}M",
            gap_percent(report.total_params as f64, target),
            target / 1e6
        );
    }
    if let Some((_, ftarget)) = row {
        if against.is_none() {
            println!(
                "flops gap: {:+.4}% vs {:.2}G",
                gap_percent(report.total_flops as f64, ftarget),
                ftarget / 1e9
            );
        }
    }
    Ok(0)
}

fn load_into<T: Element>(
    params: &mut NetParams<T>,
    entries: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    let mut map: BTreeMap<String, Tensor<T>> = entries.into_iter().collect();
    let mut problems = Vec::new();
    params.visit_mut(&mut |name, t| match map.remove(&name) {
        Some(v) if v.dims() == t.dims() => *t = v,
        Some(v) => problems.push(format!(
            "{name}: file has {:?}, model wants {:?}",
            v.dims(),
            t.dims()
        )),
        None => problems.push(format!("{name}: missing from file")),
    });
    problems.extend(map.keys().map(|k| format!("{k}: not in the model")));
    if !problems.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "weights do not fit the configured network: {}",
            problems.join("; ")
        )));
    }
    Ok(())
}

fn forward(
    cfg: &NetConfigFile,
    seed: u64,
    weights: Option<&Path>,
    input: &str,
    stats: bool,
    resolution: usize,
) -> Result<i32> {
    let net = cfg.build()?;
    let mut params: NetParams<f32> = NetParams::init(&net, &mut seeded_rng(seed))?;
    if let Some(path) = weights {
        load_into(&mut params, load_weights::<f32>(path)?)?;
    }
    let x: Tensor<f32> = if input == "random" {
        normal_tensor(
            &[1, 3, resolution, resolution],
            0.0,
            1.0,
            &mut seeded_rng(seed ^ 0x696e),
        )
    } else {
        let mut records = load_weights::<f32>(Path::new(input))?;
        if records.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "input file {input} holds no tensor"
            )));
        }
        records.remove(0).1
    };
    let t0 = Instant::now();
    let (logits, trace) = forward_traced(&x, &net, &params)?;
    let elapsed = t0.elapsed().as_secs_f64();

    for entry in &trace {
        let dims = entry
            .dims
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        if stats {
            println!(
                "{:<10} {:<16} mean {:+.6} std {:.6} min {:+.6} max {:+.6}",
                entry.name, dims, entry.mean, entry.std, entry.min, entry.max
            );
        } else {
            println!("{:<10} {dims}", entry.name);
        }
    }
    println!("logits {}x{}", logits.dims()[0], logits.dims()[1]);
    eprintln!("forward took {elapsed:.2}s");
    Ok(0)
}

fn print_report(scope: &str, report: &GradCheckReport) -> bool {
    for e in &report.entries {
        println!(
            "  {:<24} max_rel {:.3e} max_abs {:.3e} {}",
            e.name,
            e.max_rel,
            e.max_abs,
            if e.pass { "ok" } else { "FAIL" }
        );
    }
    let ok = report.all_pass();
    match report.worst() {
        Some(w) => println!(
            "scope {scope}: {} (tolerance {:.0e}, worst {} at {:.3e})",
            if ok { "PASS" } else { "FAIL" },
            report.tolerance,
            w.name,
            w.max_rel
        ),
        None => println!("scope {scope}: empty report"),
    }
    ok
}

fn gradcheck(scope: &str, seed: u64, corrupt: Option<&str>) -> Result<i32> {
    let mut all = true;
    let run_ops = matches!(scope, "op" | "ops" | "all");
    let run_block = matches!(scope, "block" | "all");
    let run_net = matches!(scope, "network" | "all");
    if !(run_ops || run_block || run_net) {
        return Err(Error::UnknownVariant(format!(
            "gradcheck scope '{scope}', expected op, block, network, or all"
        )));
    }
    if corrupt.is_some() && !run_block {
        return Err(Error::InvalidConfig(
            "--corrupt applies to the block scope".into(),
        ));
    }
    if run_ops {
        all &= print_report("op", &run_op_checks(seed)?);
    }
    if run_block {
        all &= print_report("block", &run_block_check(seed, corrupt)?);
    }
    if run_net {
        all &= print_report("network", &run_network_check(seed)?);
    }
    Ok(if all { 0 } else { 1 })
}

fn toy(
    seed: u64,
    epochs: usize,
    samples: usize,
    resolution: usize,
    out: Option<&Path>,
) -> Result<i32> {
    let ds = make_synthetic_dataset::<f64>(samples, 2, resolution, seed)?;
    let mut params = ToyParams::init(resolution, 2, &mut seeded_rng(seed ^ 0x746f79))?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let records = train_toy(&mut params, &ds, &cfg)?;
    for r in &records {
        println!(
            "epoch {:>3}  train_loss {:.6}  test_loss {:.6}  accuracy {:.4}",
            r.epoch, r.train_loss, r.test_loss, r.test_accuracy
        );
    }
    let last = records.last().expect("at least one epoch");
    println!(
        "finished: {} epochs, final accuracy {:.4}",
        records.len(),
        last.test_accuracy
    );
    if let Some(path) = out {
        std::fs::write(path, records_to_csv(&records))?;
        println!("loss curve written to {}", path.display());
    }
    Ok(0)
}

fn bench(cfg: &NetConfigFile, iters: usize, resolution: usize, seed: u64) -> Result<i32> {
    if iters == 0 {
        return Err(Error::InvalidConfig("bench wants at least one iteration".into()));
    }
    let net = cfg.build()?;
    let params: NetParams<f32> = NetParams::init(&net, &mut seeded_rng(seed))?;
    let x: Tensor<f32> = normal_tensor(
        &[1, 3, resolution, resolution],
        0.0,
        1.0,
        &mut seeded_rng(seed ^ 0x696e),
    );
    for _ in 0..3 {
        forward_traced(&x, &net, &params)?;
    }
    let mut times = Vec::with_capacity(iters);
    for i in 0..iters {
        let t0 = Instant::now();
        forward_traced(&x, &net, &params)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        println!("iter {:>3}: {ms:.1} ms", i + 1);
        times.push(ms);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let p95 = times[((times.len() as f64 * 0.95).ceil() as usize).max(1) - 1];
    println!(
        "bench: {iters} iters at {resolution}x{resolution}: median {median:.1} ms, p95 {p95:.1} ms"
    );
    Ok(0)
}

fn save(
    cfg: &NetConfigFile,
    out: &Path,
    from: Option<&Path>,
    seed: u64,
    dtype: &str,
) -> Result<i32> {
    let written = match (from, dtype) {
        (Some(src), "f32") => reencode::<f32>(src, out)?,
        (Some(src), "f64") => reencode::<f64>(src, out)?,
        (None, "f32") => init_and_save::<f32>(cfg, seed, out)?,
        (None, "f64") => init_and_save::<f64>(cfg, seed, out)?,
        _ => {
            return Err(Error::InvalidConfig(format!(
                "dtype '{dtype}', expected f32 or f64"
            )))
        }
    };
    println!("wrote {written} tensors to {}", out.display());
    Ok(0)
}

fn reencode<T: Element>(src: &Path, out: &Path) -> Result<usize> {
    let entries = load_weights::<T>(src)?;
    save_weights(out, &entries)?;
    Ok(entries.len())
}

fn init_and_save<T: Element>(cfg: &NetConfigFile, seed: u64, out: &Path) -> Result<usize> {
    let net = cfg.build()?;
    let params: NetParams<T> = NetParams::init(&net, &mut seeded_rng(seed))?;
    let mut entries: Vec<(String, Tensor<T>)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t.clone())));
    save_weights(out, &entries)?;
    Ok(entries.len())
}
