//! `astcaps`: train, evaluate and inspect the capsule gait classifier.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use astcaps_core::checkpoint::{self, CheckpointError};
use astcaps_core::config::{ConfigError, DatasetConfig, RunConfig};
use astcaps_core::data::{self, DataError, Modality, SampleWindow};
use astcaps_core::metrics::{self, MetricsReport};
use astcaps_core::model::{FeatureLayer, Model};
use astcaps_core::race;
use astcaps_core::spatiotemporal::WindowLayout;
use astcaps_core::train;
use astcaps_core::verify;
use astcaps_core::{Rng, TensorError};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "astcaps", version, about = "Spatio-temporal capsule network for gait recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest to read instead of the configured one.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory that manifest paths are relative to.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_shuffle: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Load, split, train, evaluate and write a checkpoint and metrics.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write features of this layer: low_level, high_level, relationship or digit.
        #[arg(long)]
        export_features: Option<String>,
    },
    /// Finite-difference check of every layer on a toy network.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Convergence race between the memory cell and the baseline GRU.
    Race(Common),
    /// Write a synthetic dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        windows: usize,
        #[arg(long, default_value_t = 12)]
        rows: usize,
        #[arg(long, default_value_t = 10)]
        cols: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Failure with its exit code: 1 config, 2 data, 3 numeric.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::InvalidArgument { .. } => Self::Config(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ShapeMismatch(_) | CheckpointError::UnknownParam(_) | CheckpointError::MissingParam(_) => {
                Self::Config(format!("checkpoint does not match the configuration: {e}"))
            }
            _ => Self::Data(format!("checkpoint: {e}")),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    apply_overrides(&mut cfg, common)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) -> Outcome {
    if let Some(m) = &common.manifest {
        if cfg.dataset.manifest().is_none() {
            return Err(Failure::Config("--manifest given for a synthetic dataset".into()));
        }
        cfg.dataset.set_manifest(m.clone());
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = common.seed_init {
        cfg.seeds.init = s;
    }
    if let Some(s) = common.seed_shuffle {
        cfg.seeds.shuffle = s;
    }
    Ok(())
}

/// Every window of the configured dataset with its class names. `classes`
/// pins the label order of manifest datasets.
fn load_dataset(cfg: &RunConfig, base: Option<&Path>, classes: Option<&[String]>) -> Outcome<(Vec<SampleWindow>, Vec<String>)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes: n,
            windows_per_class,
            noise_sigma,
            seed,
        } => {
            let mut rng = Rng::with_stream(seed.unwrap_or(cfg.seeds.shuffle), 0);
            let windows = data::synth_generate(*n, *windows_per_class, cfg.layout, *noise_sigma, &mut rng)?;
            let names = (0..*n).map(|c| format!("class{c}")).collect();
            Ok((windows, names))
        }
        ds => {
            let manifest = ds.manifest().expect("manifest dataset");
            let (windows, names) = data::load_manifest_dataset(
                manifest,
                base,
                ds.modality(),
                cfg.layout,
                ds.timeseries_options(),
                classes,
            )?;
            if windows.is_empty() {
                return Err(Failure::Data(format!("{} yields no windows", manifest.display())));
            }
            Ok((windows, names))
        }
    }
}

fn split(cfg: &RunConfig, windows: &[SampleWindow]) -> Outcome<(Vec<SampleWindow>, Vec<SampleWindow>)> {
    Ok(data::split(windows, cfg.train_fraction, &mut Rng::with_stream(cfg.seeds.shuffle, 1))?)
}

fn write_metrics(dir: &Path, report: &MetricsReport) -> Outcome {
    let json = serde_json::to_string_pretty(report).expect("metrics serialize");
    write(&dir.join("metrics.json"), json + "\n")?;
    write(&dir.join("confusion.csv"), report.confusion_csv())?;
    for (name, roc) in report.class_names.iter().zip(&report.roc) {
        if let Some(roc) = roc {
            write(&dir.join(format!("roc_{}.csv", file_safe(name))), roc.to_csv())?;
        }
    }
    Ok(())
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn summary(report: &MetricsReport) -> String {
    let a = &report.accuracy;
    format!(
        "test accuracy: temporal {:.4} spatiotemporal {:.4} relationship {:.4} digit {:.4} fused {:.4} ({} windows)",
        a.temporal, a.spatiotemporal, a.relationship, a.digit, a.fused, report.samples
    )
}

const CHECKPOINT_FILE: &str = "model.ckpt";

fn cmd_train(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let (windows, names) = load_dataset(&cfg, common.data.as_deref(), None)?;
    let (train_set, test_set) = split(&cfg, &windows)?;
    info!("{} training and {} test windows", train_set.len(), test_set.len());
    let mut model = Model::init(cfg.model_config(names.len()), cfg.seeds.init)?.with_class_names(names)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.json"), cfg.to_json() + "\n")?;

    let mut shuffle = Rng::with_stream(cfg.seeds.shuffle, 2);
    let curve = train::train(&mut model, &train_set, &cfg.train, &mut shuffle, cfg.seeds.init, |r| {
        let l = &r.loss;
        println!(
            "epoch {:>3}  loss {:.6}  (tp {:.4} st {:.4} pc {:.4} dc {:.4})  acc {:.4}",
            r.epoch,
            l.total(),
            l.temporal,
            l.spatiotemporal,
            l.relationship,
            l.digit,
            r.acc
        );
    })?;
    write(&cfg.output_dir.join("train_curve.csv"), train::curve_csv(&curve))?;
    checkpoint::save(&model, &cfg.output_dir.join(CHECKPOINT_FILE))?;
    let report = metrics::evaluate(&model, &test_set)?;
    write_metrics(&cfg.output_dir, &report)?;
    println!("{}", summary(&report));
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, export: Option<&str>) -> Outcome {
    let layer = match export {
        None => None,
        Some(tag) => Some(FeatureLayer::parse(tag).ok_or_else(|| {
            let known: Vec<&str> = FeatureLayer::ALL.iter().map(|l| l.as_str()).collect();
            Failure::Config(format!("unknown feature layer {tag:?}; expected one of {}", known.join(", ")))
        })?),
    };
    let stored = checkpoint::load(ckpt, None)?;
    let (model, test_set, out) = match &common.config {
        Some(_) => {
            let cfg = load_config(common)?;
            let model = checkpoint::load(ckpt, Some(&cfg.model_config(stored.config.classes)))?;
            let (windows, _) = load_dataset(&cfg, common.data.as_deref(), Some(&model.class_names))?;
            let test_set = if common.manifest.is_some() {
                windows
            } else {
                split(&cfg, &windows)?.1
            };
            (model, test_set, cfg.output_dir)
        }
        None => {
            let manifest = common
                .manifest
                .as_deref()
                .ok_or_else(|| Failure::Config("eval needs --config or --manifest".into()))?;
            let (windows, _) = data::load_manifest_dataset(
                manifest,
                common.data.as_deref(),
                Modality::Timeseries,
                stored.config.layout,
                Default::default(),
                Some(&stored.class_names),
            )?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("astcaps-out"));
            (stored, windows, out)
        }
    };
    if let Some(w) = test_set.first() {
        let want = model.config.layout.len();
        if w.features.len() != want {
            return Err(Failure::Data(format!(
                "windows have {} features, the checkpoint expects {want}",
                w.features.len()
            )));
        }
    }
    create_dir(&out)?;
    let report = metrics::evaluate(&model, &test_set)?;
    write_metrics(&out, &report)?;
    if let Some(layer) = layer {
        let path = out.join(format!("features_{}.csv", layer.as_str()));
        write(&path, features_csv(&model, &test_set, layer)?)?;
    }
    println!("{}", summary(&report));
    Ok(())
}

fn features_csv(model: &Model, windows: &[SampleWindow], layer: FeatureLayer) -> Outcome<String> {
    let mut out = String::from("label");
    for i in 0..layer.width(&model.config) {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for w in windows {
        let f = model.features(&w.features, layer)?;
        out.push_str(&model.class_names[w.label]);
        for v in f.data() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

fn cmd_gradcheck(config: Option<&Path>, tolerance: f64, fault: Option<&str>) -> Outcome {
    if let Some(path) = config {
        RunConfig::load(path)?;
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Failure::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let checks = verify::gradcheck_suite(fault, verify::STEP)?;
    let mut failing = Vec::new();
    for c in &checks {
        let ok = c.passes(tolerance);
        println!(
            "{:<17} max relative error {:.3e}  {}",
            c.layer,
            c.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failing.push(c.layer.as_str());
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check above tolerance {tolerance:e} in: {}",
            failing.join(", ")
        )))
    }
}

fn cmd_race(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let (windows, names) = load_dataset(&cfg, common.data.as_deref(), None)?;
    let (train_set, _) = split(&cfg, &windows)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.json"), cfg.to_json() + "\n")?;
    let mut results = Vec::new();
    for &seed in &cfg.race.seeds {
        let r = race::convergence_race(&train_set, cfg.layout, names.len(), &cfg.race, &[seed])?.remove(0);
        write(&cfg.output_dir.join(format!("race_{seed}.csv")), r.csv())?;
        let show = |e: Option<usize>| e.map_or_else(|| "never".to_string(), |e| e.to_string());
        println!(
            "seed {seed}: memory {} gru {}",
            show(r.memory.epochs_to(cfg.race.threshold)),
            show(r.gru.epochs_to(cfg.race.threshold))
        );
        results.push(r);
    }
    let s = race::summarize(&results, &cfg.race);
    let json = serde_json::to_string_pretty(&s).expect("summary serializes");
    write(&cfg.output_dir.join("race_summary.json"), json + "\n")?;
    println!("{}", s.line());
    Ok(())
}

struct SynthParams {
    classes: usize,
    windows: usize,
    layout: WindowLayout,
    sigma: f64,
    seed: u64,
}

fn cmd_synth(out: &Path, p: &SynthParams) -> Outcome {
    if p.layout.is_empty() {
        return Err(Failure::Config("rows and cols must be positive".into()));
    }
    if p.classes < 2 || p.windows < 2 {
        return Err(Failure::Config("need at least 2 classes and 2 windows per class".into()));
    }
    if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
        return Err(Failure::Config(format!("sigma must be >= 0, got {}", p.sigma)));
    }
    let windows = data::synth_generate(p.classes, p.windows, p.layout, p.sigma, &mut Rng::with_stream(p.seed, 0))
        .map_err(|e| Failure::Config(e.to_string()))?;
    create_dir(out)?;
    let mut manifest = String::from("path,class_name\n");
    for w in &windows {
        let name = format!("class{}_{:05}.txt", w.label, w.index);
        let x = w.features.data();
        let mut text = String::new();
        for t in 0..p.layout.cols {
            let row: Vec<String> = (0..p.layout.rows).map(|k| x[k * p.layout.cols + t].to_string()).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        write(&out.join(&name), text)?;
        let _ = writeln!(manifest, "{name},class{}", w.label);
    }
    write(&out.join("manifest.csv"), manifest)?;
    let config = serde_json::json!({
        "dataset": {"kind": "timeseries", "manifest": "manifest.csv", "skip_timestamp": false},
        "layout": {"rows": p.layout.rows, "cols": p.layout.cols},
        "seeds": {"init": p.seed, "shuffle": p.seed},
        "output_dir": "run",
    });
    write(
        &out.join("config.json"),
        serde_json::to_string_pretty(&config).expect("config serializes") + "\n",
    )?;
    let (train_set, test_set) = data::split(&windows, 0.8, &mut Rng::with_stream(p.seed, 1))?;
    let acc = data::centroid_accuracy(&train_set, &test_set);
    println!(
        "wrote {} windows to {}; nearest-centroid test accuracy {acc:.4}",
        windows.len(),
        out.display()
    );
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("ASTCAPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Config(format!("ASTCAPS_THREADS must be a non-negative integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Failure::Config(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            export_features,
        } => cmd_eval(&common, &checkpoint, export_features.as_deref()),
        Command::Gradcheck {
            config,
            tolerance,
            inject_fault,
        } => cmd_gradcheck(config.as_deref(), tolerance, inject_fault.as_deref()),
        Command::Race(common) => cmd_race(&common),
        Command::Synth {
            out,
            classes,
            windows,
            rows,
            cols,
            sigma,
            seed,
        } => cmd_synth(
            &out,
            &SynthParams {
                classes,
                windows,
                layout: WindowLayout::new(rows, cols),
                sigma,
                seed,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
