//! Command-line front end: `gen-synth`, `train`, `evaluate`, `ablate`,
//! `predict`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    generate_synthetic, impute_missing, load_corpus, load_edges_csv, load_events_csv, load_speeds_csv, Corpus,
    SyntheticConfig, Topology, EDGES_FILE, EVENTS_FILE, SPEEDS_FILE,
};
use crate::error::{Error, Result};
use crate::experiment::{
    ablate, checkpoint_meta, evaluate_predictions, model_label, predictions_for_test, prediction_rows, prepare_for,
    read_predictions_csv, test_predictions, train_on_corpus, write_predictions_csv,
};
use crate::features::{construction_feature_map, denormalize, sliding_windows, FusionVariant};
use crate::graph::{build_graph, AdjacencyMode, LambdaMax};
use crate::layers::{Activation, SpatialMode};
use crate::model::{save_checkpoint, Checkpoint, FusionShape, GcnRwz, ModelConfig};
use crate::training::{LossKind, TrainConfig};

pub const SEED_ENV: &str = "GCNRWZ_SEED";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const TIMING_FILE: &str = "timing.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ABLATION_FILE: &str = "ablation_report.json";

/// Everything a command may need; loadable from JSON with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Applied to model initialization, batch shuffling and generation.
    pub seed: Option<u64>,
    pub adjacency: AdjacencyMode,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Forecast horizon used by `ablate` unless `--horizon` is given.
    pub ablation_horizon: usize,
    pub predictions_file: Option<PathBuf>,
    pub offset: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            seed: None,
            adjacency: AdjacencyMode::Gaussian,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            ablation_horizon: 6,
            predictions_file: None,
            offset: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gcnrwz", version, about = "Traffic speed forecasting under construction workzones")]
pub struct Cli {
    /// JSON run configuration; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corridor corpus.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoints plus history.json.
    Train(TrainArgs),
    /// Score a checkpoint and the baselines on the test split.
    Evaluate(EvaluateArgs),
    /// Fusion-function and kernel-radius ablations.
    Ablate(AblateArgs),
    /// Forecast from one history window.
    Predict(PredictArgs),
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args, Default)]
pub struct SeedArg {
    /// Random seed (falls back to the config file, then GCNRWZ_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = positive)]
    pub segments: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub days: Option<usize>,
    /// ring, grid or random
    #[arg(long)]
    pub topology: Option<String>,
    /// Extra-edge probability for the random topology.
    #[arg(long, default_value_t = 0.1)]
    pub edge_probability: f64,
    #[arg(long)]
    pub events: Option<usize>,
    #[arg(long)]
    pub event_depth: Option<f64>,
    #[arg(long)]
    pub event_radius: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long, value_parser = positive)]
    pub history: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub horizon: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub heads: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub d_model: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub channels: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub kernel_t: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub blocks: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub rnn_hidden: Option<usize>,
    /// linear or chebyshev
    #[arg(long)]
    pub spatial: Option<String>,
    /// Polynomial order for chebyshev mode.
    #[arg(long)]
    pub cheb_order: Option<usize>,
    #[arg(long, value_parser = parse_kebab::<Activation>)]
    pub spatial_activation: Option<Activation>,
    /// Largest Laplacian eigenvalue; computed when omitted.
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// Construction-kernel radius in miles.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// learned-both, learned-c-only or degenerate
    #[arg(long, value_parser = parse_kebab::<FusionVariant>)]
    pub fusion: Option<FusionVariant>,
    /// per-segment or full
    #[arg(long, value_parser = parse_kebab::<FusionShape>)]
    pub fusion_shape: Option<FusionShape>,
    /// Train without the construction channel.
    #[arg(long)]
    pub no_construction: bool,
    /// gaussian or binary
    #[arg(long, value_parser = parse_kebab::<AdjacencyMode>)]
    pub adjacency: Option<AdjacencyMode>,
}

#[derive(Debug, Args, Default)]
pub struct TrainingArgs {
    #[arg(long, value_parser = positive)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// mse or mae
    #[arg(long, value_parser = parse_kebab::<LossKind>)]
    pub loss: Option<LossKind>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score these predictions instead of the checkpoint's own.
    #[arg(long)]
    pub predictions_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Corpus directory supplying edges (and events when present).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Speed table to forecast from; defaults to the corpus speeds.
    #[arg(long)]
    pub speeds: Option<PathBuf>,
    /// First step of the history window; defaults to the last full window.
    #[arg(long)]
    pub offset: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn resolve_seed(flag: Option<u64>, run: &RunConfig) -> CliResult<Option<u64>> {
    if let Some(s) = flag.or(run.seed) {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| usage(format!("--{name} is required (or set it in the config file)")))
}

impl ModelArgs {
    fn apply(&self, run: &mut RunConfig) -> CliResult<()> {
        let m = &mut run.model;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        set!(history, horizon, heads, d_model, channels, kernel_t, blocks, rnn_hidden, lambda, fusion, fusion_shape);
        if let Some(a) = self.spatial_activation {
            m.spatial_activation = a;
        }
        if let Some(l) = self.lambda_max {
            m.lambda_max = LambdaMax::Fixed(l);
        }
        match self.spatial.as_deref() {
            None => {
                if let (Some(k), SpatialMode::Chebyshev { .. }) = (self.cheb_order, m.spatial_mode) {
                    m.spatial_mode = SpatialMode::Chebyshev { order: k };
                }
            }
            Some("linear") => m.spatial_mode = SpatialMode::Linear,
            Some("chebyshev") => {
                m.spatial_mode = SpatialMode::Chebyshev {
                    order: self.cheb_order.unwrap_or(2),
                }
            }
            Some(other) => return Err(usage(format!("--spatial must be linear or chebyshev, got {other}"))),
        }
        if self.no_construction {
            m.include_construction = false;
        }
        if let Some(a) = self.adjacency {
            run.adjacency = a;
        }
        Ok(())
    }
}

impl TrainingArgs {
    fn apply(&self, run: &mut RunConfig) -> CliResult<()> {
        let t = &mut run.training;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.loss {
            t.loss = v;
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(usage(format!("learning rate must be non-negative, got {}", t.lr)));
        }
        if let Some(s) = resolve_seed(self.seed.seed, run)? {
            run.model.seed = s;
            run.training.seed = s;
        }
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn gen_synth(args: GenSynthArgs, mut run: RunConfig) -> CliResult<()> {
    let out = required(args.out, &run.out_dir, "out")?;
    let s = &mut run.synthetic;
    if let Some(v) = args.segments {
        s.n_segments = v;
    }
    if let Some(v) = args.days {
        s.days = v;
    }
    if let Some(t) = args.topology.as_deref() {
        s.topology = match t {
            "ring" => Topology::Ring,
            "grid" => Topology::Grid,
            "random" => Topology::Random { p: args.edge_probability },
            other => return Err(usage(format!("--topology must be ring, grid or random, got {other}"))),
        };
    }
    if let Some(v) = args.events {
        s.events.count = v;
    }
    if let Some(v) = args.event_depth {
        s.events.depth = v;
    }
    if let Some(v) = args.event_radius {
        s.events.radius = v;
    }
    if let Some(v) = args.noise {
        s.noise = v;
    }
    if let Some(seed) = resolve_seed(args.seed.seed, &run)? {
        run.synthetic.seed = seed;
    }
    run.synthetic.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = generate_synthetic(&run.synthetic)?;
    corpus.write(&out)?;
    let speeds = corpus.speeds.values.data();
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    println!(
        "wrote {}: {} segments, {} edges, {} steps ({} days), {} events, mean speed {:.2} MPH, seed {}",
        out.display(),
        corpus.speeds.n(),
        corpus.edges.len(),
        corpus.speeds.t(),
        run.synthetic.days,
        corpus.events.len(),
        mean,
        run.synthetic.seed
    );
    Ok(())
}

fn validated_model(run: &mut RunConfig, corpus: &Corpus) -> CliResult<()> {
    run.model.segments = corpus.graph.n();
    run.model.validate().map_err(|e| usage(e.to_string()))
}

fn train_cmd(args: TrainArgs, mut run: RunConfig) -> CliResult<()> {
    args.model.apply(&mut run)?;
    args.training.apply(&mut run)?;
    let data = required(args.data, &run.data_dir, "data")?;
    let out = required(args.out, &run.out_dir, "out")?;
    let corpus = load_corpus(&data, run.adjacency)?;
    validated_model(&mut run, &corpus)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    eprintln!(
        "training {} on {} segments: H = {}, P = {}, {} parameters",
        model_label(&run.model),
        corpus.graph.n(),
        run.model.history,
        run.model.horizon,
        run.model.parameter_count()
    );
    let (outcome, prepared) = train_on_corpus(&corpus, &run.model, &run.training, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val RMSE {:.4}  MAE {:.4}  ({:.1}s)",
            r.epoch, r.train_loss, r.val_rmse, r.val_mae, r.wall_seconds
        )
    })?;
    let meta = checkpoint_meta(&corpus, &prepared, run.adjacency);
    std::fs::write(out.join(BEST_CHECKPOINT), save_checkpoint(&outcome.best, &meta)?).map_err(Error::from)?;
    std::fs::write(out.join(LAST_CHECKPOINT), save_checkpoint(&outcome.last, &meta)?).map_err(Error::from)?;
    write_json(&out.join(HISTORY_FILE), &outcome.history)?;
    let timing: Vec<_> = outcome
        .history
        .epochs
        .iter()
        .map(|r| serde_json::json!({ "epoch": r.epoch, "wall_seconds": r.wall_seconds }))
        .collect();
    write_json(&out.join(TIMING_FILE), &timing)?;
    eprintln!("best epoch {} written to {}", outcome.best_epoch, out.display());
    Ok(())
}

/// Read a checkpoint and the corpus it belongs to, checking they agree.
fn checkpoint_and_corpus(ckpt: &Path, data: &Path) -> CliResult<(GcnRwz, Checkpoint, Corpus)> {
    let bytes = std::fs::read(ckpt).map_err(|e| Error::Data(format!("{}: {e}", ckpt.display())))?;
    let ck = Checkpoint::parse(&bytes)?;
    let corpus = load_corpus(data, ck.meta.adjacency)?;
    if corpus.graph.segment_ids() != ck.meta.segment_ids.as_slice() {
        return Err(Error::Data(format!(
            "checkpoint was trained on segments {:?}, data has {:?}",
            ck.meta.segment_ids,
            corpus.graph.segment_ids()
        ))
        .into());
    }
    let model = ck.clone().into_model(&corpus.graph)?;
    Ok((model, ck, corpus))
}

fn evaluate_cmd(args: EvaluateArgs, run: RunConfig) -> CliResult<()> {
    let data = required(args.data, &run.data_dir, "data")?;
    let ckpt = required(args.checkpoint, &run.checkpoint, "checkpoint")?;
    let out = required(args.out, &run.out_dir, "out")?;
    let (model, ck, corpus) = checkpoint_and_corpus(&ckpt, &data)?;
    let prepared = prepare_for(&corpus, model.config(), ck.meta.normalization.as_ref())?;
    let own = test_predictions(&model, &prepared)?;
    let pred = match args.predictions_file.or(run.predictions_file) {
        Some(p) => predictions_for_test(&read_predictions_csv(&p)?, &prepared)?,
        None => own,
    };
    let report = evaluate_predictions(model_label(model.config()), &pred, &prepared)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let truth = denormalize(&prepared.test.targets, &prepared.norm)?;
    let rows = prediction_rows(&pred, Some(&truth), &prepared.test.start_cols, &prepared.speeds, prepared.history);
    write_predictions_csv(&out.join(PREDICTIONS_FILE), &rows)?;
    for row in &report.models {
        eprintln!(
            "{:<20} RMSE {:.4}  MAE {:.4}  MAPE {}",
            row.model,
            row.report.global.rmse,
            row.report.global.mae,
            row.report.global.mape.map_or("n/a".into(), |m| format!("{m:.2}%"))
        );
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs, mut run: RunConfig) -> CliResult<()> {
    run.model.horizon = run.ablation_horizon;
    args.model.apply(&mut run)?;
    args.training.apply(&mut run)?;
    let data = required(args.data, &run.data_dir, "data")?;
    let out = required(args.out, &run.out_dir, "out")?;
    let corpus = load_corpus(&data, run.adjacency)?;
    validated_model(&mut run, &corpus)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let report = ablate(&corpus, &run.model, &run.training, |setting, r| {
        eprintln!("[{setting}] epoch {:>3}  loss {:.6}  val RMSE {:.4}", r.epoch, r.train_loss, r.val_rmse)
    })?;
    write_json(&out.join(ABLATION_FILE), &report)?;
    for row in report.fusion.iter().chain(&report.lambda) {
        eprintln!("{:<16} RMSE {:.4}  MAE {:.4}", row.setting, row.rmse, row.mae);
    }
    Ok(())
}

fn predict_cmd(args: PredictArgs, run: RunConfig) -> CliResult<()> {
    let data = required(args.data, &run.data_dir, "data")?;
    let ckpt = required(args.checkpoint, &run.checkpoint, "checkpoint")?;
    let out = required(args.out, &run.out_dir, "out")?;
    let bytes = std::fs::read(&ckpt).map_err(|e| Error::Data(format!("{}: {e}", ckpt.display())))?;
    let ck = Checkpoint::parse(&bytes)?;
    let edges = load_edges_csv(&data.join(EDGES_FILE))?;
    let graph = build_graph(&ck.meta.segment_ids, &edges, ck.meta.adjacency)?;
    let model = ck.clone().into_model(&graph)?;
    let cfg = model.config();
    let norm = ck
        .meta
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalization parameters".into()))?;

    let speeds_path = args.speeds.unwrap_or_else(|| data.join(SPEEDS_FILE));
    let (raw, mask) = load_speeds_csv(&speeds_path, Some(graph.segment_ids()))?;
    let (speeds, _) = impute_missing(&raw, &mask)?;
    let t = speeds.t();
    if t < cfg.history {
        return Err(Error::Data(format!(
            "{} has {t} steps; at least H = {} are needed",
            speeds_path.display(),
            cfg.history
        ))
        .into());
    }
    let offset = args.offset.or(run.offset).unwrap_or(t - cfg.history);
    if offset + cfg.history > t {
        return Err(Error::Data(format!(
            "offset {offset} leaves fewer than H = {} steps in a series of {t}",
            cfg.history
        ))
        .into());
    }
    let events_path = data.join(EVENTS_FILE);
    let events = if events_path.exists() { load_events_csv(&events_path)? } else { Vec::new() };
    let construction = construction_feature_map(&graph, &events, cfg.lambda, t, speeds.start)?;
    let xs = norm.apply(&speeds.values)?;

    // pad the series so the window is cut even when no targets exist
    let n = speeds.n();
    let avail = (t - offset - cfg.history).min(cfg.horizon);
    let span = cfg.history + cfg.horizon;
    let cut = |m: &crate::tensor::Tensor| -> Result<crate::tensor::Tensor> {
        let mut v = Vec::with_capacity(n * span);
        for i in 0..n {
            let row = &m.data()[i * t..(i + 1) * t];
            for k in 0..span {
                v.push(row.get(offset + k).copied().unwrap_or(f64::NAN));
            }
        }
        crate::tensor::Tensor::new(&[n, span], v)
    };
    let xs_w = cut(&xs)?;
    let xc_w = cut(&construction.values)?;
    let channels = if cfg.include_construction { vec![&xs_w, &xc_w] } else { vec![&xs_w] };
    let ds = sliding_windows(&channels, cfg.history, cfg.horizon, 1)?;
    let pred = denormalize(&model.forward(&ds.inputs)?, norm)?;
    let truth_raw = cut(&speeds.values)?;
    let mut rows = prediction_rows(&pred, None, &[offset], &speeds, cfg.history);
    for (idx, r) in rows.iter_mut().enumerate() {
        let (i, k) = (idx / cfg.horizon, idx % cfg.horizon);
        if k < avail {
            r.true_mph = Some(truth_raw.data()[i * span + cfg.history + k]);
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    write_predictions_csv(&out, &rows)?;
    eprintln!(
        "wrote {} forecasts ({} segments × {} steps) to {}",
        rows.len(),
        n,
        cfg.horizon,
        out.display()
    );
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let run = load_run_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, run),
        Command::Train(a) => train_cmd(a, run),
        Command::Evaluate(a) => evaluate_cmd(a, run),
        Command::Ablate(a) => ablate_cmd(a, run),
        Command::Predict(a) => predict_cmd(a, run),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
