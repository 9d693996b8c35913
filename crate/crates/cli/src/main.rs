//! `qtz`: train, quantize, calibrate, convert, run and analyze small CNNs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 data error, 4 missing activation range. Diagnostics go to stderr;
//! stdout carries one JSON object per command.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qtz_core::analysis::{self, histogram_series, weight_power_histogram, SchemeChoice};
use qtz_core::data::{self, DataError, Dataset};
use qtz_core::format::{self, Artifact};
use qtz_core::graph::{fold_bn_eval, Graph, GraphError, RunOptions};
use qtz_core::kernels::IntModel;
use qtz_core::ops::argmax_rows;
use qtz_core::ptq::{self, PTQConfig, PtqError, RangeTable};
use qtz_core::qat::{self, ModelSpec, QatError, QatModel, TrainConfig};
use qtz_core::{RangeSpec, Scheme};
use serde_json::json;

#[derive(Parser)]
#[command(name = "qtz", version, about = "Integer quantization toolkit for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or fine-tune) the reference CNN, optionally with simulated quantization.
    Train(TrainArgs),
    /// Write a weight-only quantized artifact. Needs no data.
    QuantizeWeights(QuantizeWeightsArgs),
    /// Estimate activation ranges from sample data.
    Calibrate(CalibrateArgs),
    /// Convert a float model and activation ranges into an integer model.
    Convert(ConvertArgs),
    /// Evaluate any artifact on the test split.
    Run(RunArgs),
    /// Per-channel SQNR and weight-power histograms.
    Analyze(AnalyzeArgs),
    /// Write a synthetic digit dataset in IDX format.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with IDX train/test files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides `rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Metrics CSV path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Affine,
    Symmetric,
    SymmetricUnsigned,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Affine => Scheme::Affine,
            SchemeArg::Symmetric => Scheme::SymmetricSigned,
            SchemeArg::SymmetricUnsigned => Scheme::SymmetricUnsigned,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerLayer,
    PerChannel,
}

#[derive(Args)]
struct QuantArgs {
    /// TOML file with quantization settings; flags override it.
    #[arg(long = "quant-config")]
    quant_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    /// Weight bits (4 or 8).
    #[arg(long)]
    bits: Option<u8>,
    /// Activation bits (4 or 8).
    #[arg(long)]
    activation_bits: Option<u8>,
    #[arg(long)]
    narrow_range: bool,
}

impl QuantArgs {
    fn config(&self) -> Result<PTQConfig> {
        let mut c: PTQConfig = match &self.quant_config {
            Some(p) => parse_toml(p)?,
            None => PTQConfig::default(),
        };
        if let Some(s) = self.scheme {
            c.weight_scheme = s.into();
        }
        if let Some(g) = self.granularity {
            c.weight_per_channel = matches!(g, GranularityArg::PerChannel);
        }
        if let Some(b) = self.bits {
            c.weight_bits = b;
        }
        if let Some(b) = self.activation_bits {
            c.activation_bits = b;
        }
        c.weight_narrow_range |= self.narrow_range;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct QuantizeWeightsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory with IDX files; required unless `--training-ranges`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Shuffle the training split with this seed before batching.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the moving ranges recorded during training (checkpoints only).
    #[arg(long)]
    training_ranges: bool,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ranges: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-op timing CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Bins of the weight-power histograms.
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    train: usize,
    #[arg(long, default_value_t = 10_000)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// A user-supplied setting is invalid.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<PtqError>() {
            match e {
                PtqError::Config(_) => return 2,
                PtqError::MissingRange(_) => return 4,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<QatError>() {
            match e {
                QatError::Config(_) => return 2,
                QatError::MissingRange(_) => return 4,
                QatError::DataExhausted { .. } => return 3,
                _ => {}
            }
        }
        if matches!(cause.downcast_ref::<GraphError>(), Some(GraphError::MissingRange(_))) {
            return 4;
        }
    }
    1
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path) -> Result<Artifact> {
    format::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn float_graph(a: &Artifact, path: &Path) -> Result<Graph> {
    match a {
        Artifact::Float(g) => Ok(g.clone()),
        Artifact::Checkpoint(m) => Ok(m.to_graph(false)),
        Artifact::WeightOnly(_) | Artifact::Integer(_) => Err(config_err(format!(
            "{} is already quantized ({:?}); pass a float model or checkpoint",
            path.display(),
            a.kind()
        ))),
    }
}

fn print(v: serde_json::Value) {
    println!("{v}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::QuantizeWeights(a) => quantize_weights(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Convert(a) => convert(a),
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => parse_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    let (train_set, test_set) = data::load_dir(&a.data)?;
    let model = match &a.init {
        Some(p) => match load(p)? {
            Artifact::Checkpoint(m) => m,
            other => QatModel::from_graph(&float_graph(&other, p)?, &cfg)?,
        },
        None => {
            let spec = ModelSpec { input: train_set.image_shape(), ..ModelSpec::reference() };
            QatModel::new(spec, &cfg)
        }
    };
    let t = Instant::now();
    let out = qat::train(&model, &train_set, &test_set, &cfg)?;
    eprintln!("trained {} steps in {:.1?}", cfg.total_steps, t.elapsed());
    let size = format::save(&a.out, &Artifact::Checkpoint(out.model))?;
    let metrics_path = a.metrics.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    qat::write_metrics_csv(&out.metrics, std::io::BufWriter::new(file))?;
    let last = out.metrics.last();
    print(json!({
        "checkpoint": a.out,
        "metrics": metrics_path,
        "steps": cfg.total_steps,
        "final_loss": last.map(|r| r.loss),
        "eval_accuracy": last.and_then(|r| r.eval_acc_inst),
        "bytes": size.total(),
    }));
    Ok(())
}

fn quantize_weights(a: QuantizeWeightsArgs) -> Result<()> {
    let cfg = a.quant.config()?;
    let input = load(&a.model)?;
    let g = float_graph(&input, &a.model)?;
    let q = ptq::quantize_weights_only(&g, &cfg)?;
    let float_weight_bytes: usize = q.weights.keys().map(|k| q.graph.params[k].len() * 4).sum();
    let float_file = {
        let (m, b) = format::encode(&Artifact::Float(g))?;
        m.len() + b.len()
    };
    let size = format::save(&a.out, &Artifact::WeightOnly(q))?;
    let ratio = size.weight_payload as f64 / float_weight_bytes as f64;
    eprintln!("weight payload {} -> {} bytes ({:.4}x)", float_weight_bytes, size.weight_payload, ratio);
    print(json!({
        "artifact": a.out,
        "float_weight_bytes": float_weight_bytes,
        "quantized_weight_bytes": size.weight_payload,
        "size_ratio": ratio,
        "logical_size_ratio": cfg.weight_bits as f64 / 32.0,
        "float_file_bytes": float_file,
        "file_bytes": size.total(),
        "file_ratio": size.total() as f64 / float_file as f64,
    }));
    Ok(())
}

fn calibration_batches(train: &Dataset, batch: usize, count: usize, seed: Option<u64>) -> Vec<qtz_core::Tensor> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    if let Some(seed) = seed {
        data::shuffle_indices(&mut order, seed);
    }
    order.chunks(batch).filter(|c| c.len() == batch).take(count).map(|c| train.batch(c).0).collect()
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut cfg = a.quant.config()?;
    if a.batches == 0 || a.batch_size == 0 {
        return Err(config_err("--batches and --batch-size must be at least 1"));
    }
    cfg.calibration_batches = a.batches;
    let model = load(&a.model)?;
    let ranges: RangeTable = if a.training_ranges {
        let Artifact::Checkpoint(m) = &model else {
            return Err(config_err("--training-ranges needs a checkpoint"));
        };
        m.activation_ranges()
    } else {
        let dir = a.data.as_ref().ok_or_else(|| config_err("--data is required unless --training-ranges is set"))?;
        let (train, _) = data::load_dir(dir)?;
        let batches = calibration_batches(&train, a.batch_size, a.batches, a.seed);
        if batches.is_empty() {
            return Err(DataError::Empty.into());
        }
        ptq::calibrate(&float_graph(&model, &a.model)?, batches, &cfg)?
    };
    let text = serde_json::to_string_pretty(&ranges)?;
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("{} activation ranges", ranges.len());
    print(json!({ "ranges": a.out, "tensors": ranges }));
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let cfg = a.quant.config()?;
    let model = load(&a.model)?;
    let g = float_graph(&model, &a.model)?;
    let text = fs::read_to_string(&a.ranges).map_err(|e| config_err(format!("{}: {e}", a.ranges.display())))?;
    let ranges: BTreeMap<String, RangeSpec> =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", a.ranges.display())))?;
    let int_model = ptq::convert(&g, &ranges, &cfg)?;
    let layers = int_model.layer_plans().count();
    let size = format::save(&a.out, &Artifact::Integer(int_model))?;
    print(json!({ "artifact": a.out, "ops_with_weights": layers, "file_bytes": size.total() }));
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let model = load(&a.model)?;
    let (_, test) = data::load_dir(&a.data)?;
    let test = match a.limit {
        Some(n) => test.head(n),
        None => test,
    };
    if test.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut rows: Vec<(String, String, Duration)> = Vec::new();
    let mut correct = 0usize;
    let start = Instant::now();
    match &model {
        Artifact::Integer(m) => {
            rows = m.ops.iter().map(|op| (op.name().to_string(), op_kind(m, op.name()), Duration::ZERO)).collect();
            for (x, labels) in test.batches(256) {
                let (vals, times) = m.run_codes_profiled(m.quantize_input(&x)?)?;
                for (row, t) in rows.iter_mut().zip(times) {
                    row.2 += t;
                }
                let (codes, _) = &vals[&m.outputs[0]];
                let logits = qtz_core::Tensor::new(codes.shape().to_vec(), codes.data().iter().map(|&c| c as f64).collect());
                correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            }
        }
        other => {
            let g = other.graph().expect("non-integer artifacts have a graph");
            let input = g.input_nodes().next().context("graph has no input")?.output.clone();
            let mut total = Duration::ZERO;
            for (x, labels) in test.batches(256) {
                let t = Instant::now();
                let out = g.run(&[(input.clone(), x)].into_iter().collect(), RunOptions::default())?;
                total += t.elapsed();
                let logits = out.values().next().context("graph has no output")?;
                correct += argmax_rows(logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            }
            rows.push(("graph".into(), "float".into(), total));
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    if let Some(p) = &a.report {
        let mut csv = String::from("op,kind,total_us\n");
        for (name, kind, t) in &rows {
            csv.push_str(&format!("{name},{kind},{}\n", t.as_micros()));
        }
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("{} samples in {:.2?}", test.len(), start.elapsed());
    print(json!({
        "kind": model.kind(),
        "samples": test.len(),
        "accuracy": accuracy,
        "ops": rows.iter().map(|(n, k, t)| json!({"op": n, "kind": k, "total_us": t.as_micros() as u64})).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn op_kind(m: &IntModel, name: &str) -> String {
    use qtz_core::kernels::IntOp;
    match m.ops.iter().find(|o| o.name() == name) {
        Some(IntOp::Layer { plan, .. }) => format!("{:?}", plan.layer).to_lowercase(),
        Some(IntOp::Add { .. }) => "add".into(),
        Some(IntOp::Concat { .. }) => "concat".into(),
        Some(IntOp::Activation { .. }) => "activation".into(),
        Some(IntOp::AvgPool { .. }) => "avg_pool".into(),
        None => String::new(),
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    if ![4, 8, 16].contains(&a.bits) {
        return Err(config_err(format!("--bits must be 4, 8 or 16, got {}", a.bits)));
    }
    let model = load(&a.model)?;
    let g = float_graph(&model, &a.model)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let reports = analysis::compare_schemes(&g, a.bits)?;
    fs::write(a.out.join("sqnr.csv"), analysis::reports_csv(&reports))?;
    fs::write(a.out.join("sqnr.json"), serde_json::to_string_pretty(&reports)?)?;
    let folded = fold_bn_eval(&g)?;
    let mut power = Vec::new();
    // Layers keep their names through folding; weights are looked up per graph.
    for (stage, graph) in [("unfolded", &g), ("folded", &folded)] {
        for node in graph.nodes.iter().filter(|n| n.op.layer_kind().is_some()) {
            let Some(w) = graph.params.get(&node.inputs[1]) else { continue };
            let h = weight_power_histogram(w, a.bins)?;
            fs::write(a.out.join(format!("power_{}_{stage}.csv", node.name)), histogram_series(&h.histogram))?;
            power.push(json!({"layer": node.name, "stage": stage, "max_normalized_power": h.max_normalized_power}));
        }
    }
    for r in &reports {
        fs::write(a.out.join(format!("sqnr_{}_{}.csv", r.layer, r.scheme.name())), histogram_series(&r.histogram))?;
    }
    let summary: Vec<_> = reports
        .iter()
        .map(|r| json!({"layer": r.layer, "scheme": r.scheme.name(), "mean_db": r.mean_db(), "min_db": r.min_db()}))
        .collect();
    let dominated = reports.chunks(SchemeChoice::ALL.len()).all(|c| {
        let pl = &c[0].sqnr_db;
        c[2].sqnr_db.iter().zip(pl).all(|(pc, pl)| pc >= pl)
    });
    eprintln!("wrote {} reports to {}", reports.len(), a.out.display());
    print(json!({ "sqnr": summary, "power": power, "per_channel_dominates": dominated }));
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    data::write_synthetic_dir(&a.out, a.train, a.test, a.seed)?;
    print(json!({ "dir": a.out, "train": a.train, "test": a.test, "seed": a.seed }));
    Ok(())
}
