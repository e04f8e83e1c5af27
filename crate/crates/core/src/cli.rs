//! `embnum` command line. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::baselines::{self, BaselineError, LogisticModel};
use crate::dataset::{self, DatasetError, SplitAxis, SyntheticSpec};
use crate::embnet::{self, ArchConfig, InputNorm, ModelError, Ratio};
use crate::labeling::{self, LabelingError, Method, MethodKind};
use crate::metric::{self, TrainConfig, TrainError};
use crate::sampling::{self, SamplingError, SamplingMethod};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    InvalidInput { path: PathBuf, message: String },
}

impl CliError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dataset(e) => e.name(),
            Self::Sampling(e) => e.name(),
            Self::Model(e) => e.name(),
            Self::Train(e) => e.name(),
            Self::Baseline(e) => e.name(),
            Self::Labeling(e) => e.name(),
            Self::Io { .. } => "IoError",
            Self::InvalidInput { .. } => "InvalidInput",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "embnum", version, about = "Semantic labeling of numerical attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a SyntheticSpec JSON file.
    Gen {
        /// SyntheticSpec JSON.
        spec: PathBuf,
        /// Output dataset directory (must not exist).
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduce one attribute file to an h-vector.
    Sample {
        /// One value per line.
        file: PathBuf,
        #[arg(long, default_value_t = 100)]
        h: usize,
        #[arg(long, value_enum, default_value_t = SampleMethod::Inverse)]
        method: SampleMethod,
        /// Seed for `--method random`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an embedding model with the triplet loss.
    Train(TrainArgs),
    /// Fit the DSL logistic-regression scorer.
    TrainDsl {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
    },
    /// Build a feature store from a labeled dataset directory.
    Index {
        data: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the labels of a store against one query attribute file.
    Label {
        #[arg(long)]
        store: PathBuf,
        /// Checkpoint the store was built with (embnum stores only).
        #[arg(long)]
        model: Option<PathBuf>,
        query: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Run the leave-one-source-out benchmark and write a JSON report.
    Benchmark {
        data: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write `label,source,e0..` embeddings of every attribute as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Halve a dataset by source or label.
    Split {
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::Source)]
        by: Axis,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SampleMethod {
    Inverse,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Source,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Args)]
struct MethodArgs {
    /// embnum, semantictyper or dsl.
    #[arg(long)]
    method: MethodKind,
    /// Checkpoint (embnum) or DSL model JSON (dsl).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Channel multiplier such as `1/8`.
    #[arg(long)]
    width_multiplier: Option<Ratio>,
    /// none or signed_log.
    #[arg(long)]
    input_norm: Option<InputNorm>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_step: Option<usize>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Labels per batch (P).
    #[arg(long)]
    batch_labels: Option<usize>,
    /// Attributes per label in a batch (K).
    #[arg(long)]
    samples_per_label: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn configs(&self) -> (ArchConfig, TrainConfig) {
        let (mut arch, mut cfg) = match self.preset {
            Preset::Full => (ArchConfig::default(), TrainConfig::default()),
            Preset::Desk => (ArchConfig::desk(), TrainConfig::desk()),
        };
        macro_rules! set {
            ($target:ident . $field:ident) => {
                if let Some(v) = self.$field {
                    $target.$field = v;
                }
            };
        }
        set!(arch.h);
        set!(arch.k);
        set!(arch.width_multiplier);
        set!(arch.input_norm);
        set!(cfg.alpha);
        set!(cfg.lr0);
        set!(cfg.lr_step);
        set!(cfg.lr_decay);
        set!(cfg.momentum);
        set!(cfg.weight_decay);
        set!(cfg.epochs);
        set!(cfg.batch_labels);
        set!(cfg.samples_per_label);
        set!(cfg.seed);
        (arch, cfg)
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.name());
            1
        }
    }
}

fn configure_threads() {
    let Ok(raw) = std::env::var("EMBNUM_THREADS") else {
        return;
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::debug!("thread pool already initialized");
            }
        }
        _ => log::warn!("ignoring EMBNUM_THREADS={raw:?}"),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    crate::io::write_atomic(path, bytes).map_err(io_err(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_out(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::InvalidInput {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes the dataset into a sibling temporary directory and renames it.
fn write_dataset_atomic(d: &dataset::Dataset, out: &Path) -> Result<(), CliError> {
    if out.exists() {
        return Err(CliError::InvalidInput {
            path: out.to_path_buf(),
            message: "output directory already exists".into(),
        });
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = tempfile::Builder::new()
        .prefix(".embnum-")
        .tempdir_in(parent)
        .map_err(io_err(parent))?;
    dataset::write_dataset(d, tmp.path())?;
    let staged = tmp.keep();
    std::fs::rename(&staged, out).map_err(|e| {
        let _ = std::fs::remove_dir_all(&staged);
        CliError::Io {
            path: out.to_path_buf(),
            source: e,
        }
    })
}

fn load_method(args: &MethodArgs) -> Result<Method, CliError> {
    let need_model = || {
        args.model
            .as_deref()
            .ok_or(LabelingError::MissingModel(args.method))
    };
    Ok(match args.method {
        MethodKind::Embnum => Method::EmbNum(Arc::new(embnet::load_model(need_model()?)?)),
        MethodKind::Semantictyper => Method::SemanticTyper,
        MethodKind::Dsl => Method::Dsl(read_json::<LogisticModel>(need_model()?)?),
    })
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            let d = dataset::generate_synthetic(&spec)?;
            write_dataset_atomic(&d, &out)?;
            log::info!("wrote {} attributes to {}", d.len(), out.display());
        }
        Command::Sample { file, h, method, seed } => {
            let values = dataset::parse_attribute_file(&file)?;
            let method = match method {
                SampleMethod::Inverse => SamplingMethod::InverseTransform,
                SampleMethod::Random => SamplingMethod::RandomChoice { seed },
            };
            let v = sampling::sample(&values, h, method)?;
            let line: Vec<String> = v.values().iter().map(|&x| dataset::format_value(x)).collect();
            println!("{}", line.join(","));
        }
        Command::Train(args) => {
            let (arch, cfg) = args.configs();
            let d = dataset::load_dataset(&args.data)?;
            let (model, history) = metric::train::<f32>(&d, &arch, &cfg)?;
            let history_path = args.history.clone().unwrap_or_else(|| {
                let mut p = args.out.clone().into_os_string();
                p.push(".history.csv");
                PathBuf::from(p)
            });
            embnet::save_model(&model, &args.out)?;
            write_out(&history_path, metric::history_csv(&history).as_bytes())?;
            log::info!(
                "best train MRR {:.4} at epoch {}",
                model.meta.best_mrr,
                model.meta.best_epoch
            );
        }
        Command::TrainDsl { data, out, iters, lr } => {
            let d = dataset::load_dataset(&data)?;
            let model = baselines::dsl_train_on_dataset(&d, iters, lr)?;
            let json = serde_json::to_string_pretty(&model).expect("model serializes");
            write_out(&out, json.as_bytes())?;
        }
        Command::Index { data, method, out } => {
            let d = dataset::load_dataset(&data)?;
            let store = labeling::index_labeled(&d, &load_method(&method)?)?;
            labeling::save_store(&store, &out)?;
        }
        Command::Label {
            store,
            model,
            query,
            top,
        } => {
            let model = model
                .as_deref()
                .map(embnet::load_model)
                .transpose()?
                .map(Arc::new);
            let store = labeling::load_store(&store, model)?;
            let values = dataset::parse_attribute_file(&query)?;
            let feature = labeling::extract_features(store.method(), &[&values])?
                .pop()
                .expect("one feature");
            let ranking = labeling::rank_feature(&store, &feature)?;
            println!("rank,label,source,score");
            for (i, e) in ranking.entries.iter().take(top).enumerate() {
                println!("{},{},{},{}", i + 1, e.label, e.source, e.score);
            }
        }
        Command::Benchmark { data, method, out } => {
            let d = dataset::load_dataset(&data)?;
            let report = labeling::run_benchmark(&d, &load_method(&method)?)?;
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            emit(out.as_deref(), &json)?;
        }
        Command::ExportEmbeddings { model, data, out } => {
            let model = embnet::load_model(&model)?;
            let d = dataset::load_dataset(&data)?;
            emit(out.as_deref(), &labeling::export_embeddings(&model, &d)?)?;
        }
        Command::Split {
            data,
            by,
            seed,
            out_a,
            out_b,
        } => {
            let d = dataset::load_dataset(&data)?;
            let axis = match by {
                Axis::Source => SplitAxis::Source,
                Axis::Label => SplitAxis::Label,
            };
            let (a, b) = dataset::split_halves(&d, axis, seed);
            write_dataset_atomic(&a, &out_a)?;
            write_dataset_atomic(&b, &out_b)?;
        }
    }
    Ok(())
}
