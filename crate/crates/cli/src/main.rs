//! `cema` command-line tool.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cema::adapt::AdaptConfig;
use cema::cloud::{serve, ServerConfig, StepHook};
use cema::edge::{
    run_offline, run_stream, EdgeConfig, EdgeNode, EdgeShared, TcpUplink, TcpUplinkConfig,
};
use cema::filtration::{FilterStrategy, FiltrationConfig};
use cema::harness::{
    accuracy, ece_from_confidence, gen_stream, load_stream, pretrain, read_runs_csv,
    run_experiment, save_stream, write_reports, Corruption, CorruptionKind, ExperimentConfig,
    Generator, PretrainConfig, RunReport, Scenario, StreamSpec, ECE_BINS, NO_LABEL,
};
use cema::nn::{load_checkpoint, save_checkpoint, spec_hash, ModelSpec};

#[derive(Parser)]
#[command(name = "cema", version, about = "Cloud-edge test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a clean stream and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Generate a synthetic stream file.
    GenStream(GenStreamArgs),
    /// Run scenarios over a stream with an in-process cloud.
    Run(RunArgs),
    /// Summarize a runs.csv.
    Report(ReportArgs),
    /// Run the cloud adaptation server.
    Serve(ServeArgs),
    /// Run an edge node over a stream file.
    Edge(EdgeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Blobs,
    Rings,
}

impl From<GeneratorArg> for Generator {
    fn from(g: GeneratorArg) -> Self {
        match g {
            GeneratorArg::Blobs => Generator::GaussianBlobs,
            GeneratorArg::Rings => Generator::ConcentricRings,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptionArg {
    None,
    Gaussian,
    Dropout,
    Affine,
}

impl From<CorruptionArg> for CorruptionKind {
    fn from(c: CorruptionArg) -> Self {
        match c {
            CorruptionArg::None => CorruptionKind::None,
            CorruptionArg::Gaussian => CorruptionKind::AdditiveGaussian,
            CorruptionArg::Dropout => CorruptionKind::FeatureDropout,
            CorruptionArg::Affine => CorruptionKind::AffineDistort,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    UploadAll,
    FixedHigh,
    DynamicHigh,
    DynamicHighLow,
}

impl From<StrategyArg> for FilterStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::UploadAll => FilterStrategy::UploadAll,
            StrategyArg::FixedHigh => FilterStrategy::FixedHigh,
            StrategyArg::DynamicHigh => FilterStrategy::DynamicHigh,
            StrategyArg::DynamicHighLow => FilterStrategy::DynamicHighLow,
        }
    }
}

/// Task geometry shared by `pretrain` and `gen-stream`.
#[derive(Args)]
struct WorldArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    generator: GeneratorArg,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    input_dim: usize,
    /// Seed of the class geometry.
    #[arg(long, default_value_t = 1000)]
    world: u64,
}

impl WorldArgs {
    fn spec(&self, num_samples: usize, seed: u64) -> StreamSpec {
        let mut s = StreamSpec::blobs(num_samples, self.world, seed);
        s.generator = self.generator.into();
        s.num_classes = self.classes;
        s.input_dim = self.input_dim;
        s
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    world: WorldArgs,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    train_samples: usize,
    #[arg(long, default_value_t = 5_000)]
    heldout_samples: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Initialization and shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Abort when held-out accuracy ends below this.
    #[arg(long, default_value_t = 0.8)]
    min_accuracy: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenStreamArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Seed of the sample draws.
    #[arg(long, default_value_t = 50)]
    seed: u64,
    #[arg(long, value_enum, default_value = "none")]
    corruption: CorruptionArg,
    /// Severity 1 to 5.
    #[arg(long, default_value_t = 3)]
    severity: u8,
    /// Equal contiguous segments with these corruptions, in order, at `--severity`.
    #[arg(long, value_enum, value_delimiter = ',')]
    mixed: Vec<CorruptionArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FiltrationArgs {
    #[arg(long, default_value_t = 0.4)]
    e_max_factor: f64,
    #[arg(long, default_value_t = 0.02)]
    e_min_factor: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Enable the redundancy filter.
    #[arg(long)]
    redundancy: bool,
    #[arg(long, default_value_t = 0.05)]
    redundancy_eps: f64,
}

impl FiltrationArgs {
    fn apply(&self, f: &mut FiltrationConfig) {
        f.e_max_factor = self.e_max_factor;
        f.e_min_factor = self.e_min_factor;
        f.lambda = self.lambda;
        f.redundancy_enabled = self.redundancy;
        f.redundancy_eps = self.redundancy_eps;
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, default_value_t = AdaptConfig::DESK_SCALE_LEARNING_RATE)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 3.0)]
    alpha: f32,
    #[arg(long, default_value_t = 3.0)]
    beta: f32,
    #[arg(long, default_value_t = 32)]
    upload_batch: usize,
    #[arg(long, default_value_t = 96)]
    replay_draw: usize,
    #[arg(long, default_value_t = 10_000)]
    buffer_capacity: usize,
}

impl AdaptArgs {
    fn config(&self) -> AdaptConfig {
        AdaptConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            alpha: self.alpha,
            beta: self.beta,
            upload_batch: self.upload_batch,
            replay_draw: self.replay_draw,
            buffer_capacity: self.buffer_capacity,
            ..AdaptConfig::desk_scale()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    foundation: PathBuf,
    #[arg(long)]
    edge: PathBuf,
    /// Stream files; every scenario runs on each.
    #[arg(long, required = true, num_args = 1..)]
    stream: Vec<PathBuf>,
    /// Scenarios to run; all when omitted.
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<Scenario>,
    /// Override the scenario's filtration strategy.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Replay-draw seeds; one run per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    interval: usize,
    #[arg(long, default_value_t = 256)]
    queue_cap: usize,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[command(flatten)]
    filtration: FiltrationArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A runs.csv or the directory holding it.
    path: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long)]
    foundation: PathBuf,
    #[arg(long)]
    edge: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_sessions: usize,
    /// Replay-draw seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many adaptation steps.
    #[arg(long)]
    max_steps: Option<u64>,
    #[command(flatten)]
    adapt: AdaptArgs,
}

#[derive(Args)]
struct EdgeArgs {
    /// Edge model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, required_unless_present = "offline")]
    cloud: Option<String>,
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    interval: usize,
    #[arg(long, default_value_t = 256)]
    queue_cap: usize,
    #[arg(long, default_value_t = 0)]
    edge_id: u32,
    #[arg(long, default_value_t = 5_000)]
    flush_timeout_ms: u64,
    /// Pause between batches, simulating the stream's arrival rate.
    #[arg(long, default_value_t = 0)]
    batch_interval_ms: u64,
    #[arg(long, value_enum, default_value = "dynamic-high-low")]
    strategy: StrategyArg,
    #[command(flatten)]
    filtration: FiltrationArgs,
    /// Write one JSON line per prediction here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::GenStream(a) => cmd_gen_stream(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Edge(a) => cmd_edge(a),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let train = gen_stream(&a.world.spec(a.train_samples, 1))?;
    let heldout = gen_stream(&a.world.spec(a.heldout_samples, 2))?;
    let spec = ModelSpec::new(a.world.input_dim, a.hidden.clone(), a.world.classes);
    let cfg = PretrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        min_accuracy: a.min_accuracy,
        ..PretrainConfig::default()
    };
    let p = pretrain(spec, &train, &heldout, &cfg)?;
    save_checkpoint(&p.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": a.out,
            "hidden": a.hidden,
            "final_loss": p.final_loss,
            "heldout_accuracy": p.heldout_accuracy,
        })
    );
    Ok(())
}

fn cmd_gen_stream(a: GenStreamArgs) -> Result<()> {
    let corruption = |c: CorruptionArg| Corruption::at_severity(c.into(), a.severity);
    let mut spec = a
        .world
        .spec(a.samples, a.seed)
        .with_corruption(corruption(a.corruption)?);
    spec.mixed = a
        .mixed
        .iter()
        .map(|&c| corruption(c))
        .collect::<cema::Result<_>>()?;
    let samples = gen_stream(&spec)?;
    save_stream(&a.out, spec.num_classes, spec.input_dim, &samples)?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let foundation = load_checkpoint(&a.foundation)
        .with_context(|| format!("reading {}", a.foundation.display()))?;
    let edge = load_checkpoint(&a.edge).with_context(|| format!("reading {}", a.edge.display()))?;
    let classes = edge.spec().num_classes;
    let scenarios = if a.scenario.is_empty() {
        Scenario::ALL.to_vec()
    } else {
        a.scenario.clone()
    };
    let mut reports: Vec<RunReport> = Vec::new();
    for path in &a.stream {
        let (header, stream) =
            load_stream(path).with_context(|| format!("reading {}", path.display()))?;
        if header.input_dim as usize != edge.spec().input_dim
            || header.num_classes as usize != classes
        {
            bail!(
                "{} does not match the models' input or class count",
                path.display()
            );
        }
        for &scenario in &scenarios {
            for &seed in &a.seed {
                let mut cfg = ExperimentConfig::new(scenario, classes);
                cfg.edge.batch_size = a.batch_size;
                cfg.edge.update_interval = a.interval;
                cfg.edge.queue_capacity = a.queue_cap;
                cfg.adapt = a.adapt.config();
                a.filtration.apply(&mut cfg.filtration);
                cfg.strategy = a.strategy.map(Into::into);
                cfg.seed = seed;
                cfg.stream_label = path.display().to_string();
                let r = run_experiment(&cfg, &foundation, &edge, &stream).report;
                info!(
                    "{} seed {} on {}: {} accuracy {:.4}",
                    r.scenario, seed, r.stream, r.status, r.accuracy
                );
                reports.push(r);
            }
        }
    }
    write_reports(&a.out, &reports)?;
    info!("wrote {} runs to {}", reports.len(), a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let path = if a.path.is_dir() {
        a.path.join("runs.csv")
    } else {
        a.path.clone()
    };
    let runs = read_runs_csv(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{}", summarize(&runs));
    Ok(())
}

/// One line per (scenario, strategy, stream) with means over seeds.
fn summarize(runs: &[RunReport]) -> String {
    type Key = (String, String, String);
    let mut groups: Vec<(Key, Vec<&RunReport>)> = Vec::new();
    for r in runs {
        let key = (r.scenario.clone(), r.strategy.clone(), r.stream.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = format!(
        "{:<18} {:<18} {:>5} {:>6} {:>9} {:>7} {:>9} {:>6}  {}\n",
        "scenario", "strategy", "runs", "failed", "accuracy", "ece", "uploads", "steps", "stream"
    );
    for ((scenario, strategy, stream), g) in groups {
        let ok: Vec<&&RunReport> = g.iter().filter(|r| r.status == "ok").collect();
        let mean = |f: fn(&RunReport) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        out += &format!(
            "{:<18} {:<18} {:>5} {:>6} {:>9.4} {:>7.4} {:>9.4} {:>6.0}  {}\n",
            scenario,
            strategy,
            g.len(),
            g.len() - ok.len(),
            mean(|r| r.accuracy),
            mean(|r| r.ece),
            mean(|r| r.upload_fraction),
            mean(|r| r.steps as f64),
            stream
        );
    }
    out
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let foundation = load_checkpoint(&a.foundation)
        .with_context(|| format!("reading {}", a.foundation.display()))?;
    let edge = load_checkpoint(&a.edge).with_context(|| format!("reading {}", a.edge.display()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst))
        .context("installing signal handler")?;
    let (s, max_steps) = (stop.clone(), a.max_steps);
    let hook: StepHook = Box::new(move |rec| {
        println!(
            "{}",
            serde_json::to_string(rec).expect("step record serializes")
        );
        let _ = std::io::stdout().flush();
        if max_steps.is_some_and(|m| rec.step >= m) {
            s.store(true, Ordering::SeqCst);
        }
    });
    let cfg = ServerConfig {
        listen: a.listen,
        adapt: a.adapt.config(),
        max_sessions: a.max_sessions,
        seed: a.seed,
    };
    let mut handle = serve(cfg, foundation, edge, Some(hook))?;
    info!("listening on {}", handle.local_addr());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    let report = handle.shutdown();
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_edge(a: EdgeArgs) -> Result<()> {
    let model =
        load_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (header, stream) =
        load_stream(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let spec = model.spec().clone();
    if header.input_dim as usize != spec.input_dim
        || header.num_classes as usize != spec.num_classes
    {
        bail!("stream does not match the model's input or class count");
    }
    let mut filtration = FiltrationConfig::new(spec.num_classes).with_strategy(a.strategy.into());
    a.filtration.apply(&mut filtration);
    let cfg = EdgeConfig {
        batch_size: a.batch_size,
        update_interval: a.interval,
        queue_capacity: a.queue_cap,
        cloud: if a.offline { None } else { a.cloud.clone() },
        edge_id: a.edge_id,
        flush_timeout_ms: a.flush_timeout_ms,
        batch_interval_ms: a.batch_interval_ms,
        ..EdgeConfig::default()
    };
    let mut node = EdgeNode::new(model, filtration)?;
    let run = match &cfg.cloud {
        None => run_offline(&mut node, &stream, &cfg)?,
        Some(addr) => {
            let shared = Arc::new(EdgeShared::new(cfg.queue_capacity, cfg.update_interval));
            let mut uplink = TcpUplink::start(
                TcpUplinkConfig {
                    addr: addr.clone(),
                    edge_id: cfg.edge_id,
                    spec_hash: spec_hash(&spec),
                    reconnect_delay: Duration::from_millis(cfg.reconnect_delay_ms),
                    flush_timeout: cfg.flush_timeout(),
                    input_dim: spec.input_dim,
                },
                shared.clone(),
            )?;
            run_stream(&mut node, &stream, &cfg, &shared, &mut uplink)?
        }
    };
    if let Some(path) = &a.predictions {
        write_predictions(path, &run.predictions)?;
    }
    let labels: Vec<u32> = stream.iter().map(|s| s.label.unwrap_or(NO_LABEL)).collect();
    let labeled = labels.iter().any(|&l| l != NO_LABEL);
    let preds: Vec<u32> = run.predictions.iter().map(|p| p.class).collect();
    let conf: Vec<f64> = run
        .predictions
        .iter()
        .map(|p| p.confidence as f64)
        .collect();
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let mut out = serde_json::to_value(&run.stats)?;
    out["transport_error"] = serde_json::to_value(&run.transport_error)?;
    if labeled {
        out["accuracy"] = accuracy(&preds, &labels).into();
        out["ece"] = ece_from_confidence(&conf, &correct, ECE_BINS)
            .unwrap_or(f64::NAN)
            .into();
    }
    println!("{out}");
    Ok(())
}

fn write_predictions(path: &Path, preds: &[cema::edge::Prediction]) -> Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn summary_groups_and_averages() {
        let row = |seed, acc, status: &str| RunReport {
            scenario: "cema".into(),
            strategy: "dynamic-high-low".into(),
            stream: "s".into(),
            seed,
            status: status.into(),
            accuracy: acc,
            ..RunReport::default()
        };
        let text = summarize(&[row(0, 0.5, "ok"), row(1, 0.7, "ok"), row(2, 0.0, "failed")]);
        let line = text.lines().nth(1).unwrap();
        assert!(line.contains(" 0.6000 "), "{line}");
        assert!(line.contains("    3      1 "), "{line}");
    }
}
