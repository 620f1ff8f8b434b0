use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Deserialize;

use dpm_adapt::adapt::{adapt, save_beta, write_adapt_log, AdaptConfig};
use dpm_adapt::data::{load_manifest, subset_images, Dataset, SplitSpec};
use dpm_adapt::eval::{self, aggregate, curve, emit, ground_truth, group_records, log_average_mr, mean_mr};
use dpm_adapt::experiment::{self, ExperimentConfig, Mode};
use dpm_adapt::inference::{detect_in_pyramid, read_detections_csv, write_detections_csv, DetectOptions, DetectionRecord};
use dpm_adapt::model;
use dpm_adapt::rng;
use dpm_adapt::synth::{self, BenchmarkSize, DomainSpec};
use dpm_adapt::train::{calibrate_threshold, model_pyramid, train, write_train_log, TrainConfig};
use dpm_adapt::Error;

#[derive(Parser)]
#[command(name = "dpm-adapt", version, about = "DPM detector training, domain adaptation and FPPI / miss-rate evaluation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed; overrides the seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config with optional [train], [adapt] and [synth] tables. The
    /// experiment command reads a full experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic source / target benchmark.
    Synth {
        /// Output directory (source/, target-train/, target-test/).
        #[arg(long)]
        out: PathBuf,
        /// Source domain spec (default: the frozen shift pair).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target domain spec (default: the frozen shift pair).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Source images (default 500).
        #[arg(long)]
        source_images: Option<usize>,
        /// Target training images (default 300).
        #[arg(long)]
        target_train_images: Option<usize>,
        /// Target test images (default 300).
        #[arg(long)]
        target_test_images: Option<usize>,
        /// Swap the source and target domains.
        #[arg(long)]
        swap: bool,
    },
    /// Train a detector on a dataset manifest.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Train on a random fraction of the images.
        #[arg(long)]
        fraction: Option<f64>,
        /// Repetition index selecting the random subset.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Per-round training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a source model to target data.
    Adapt {
        /// Source model file.
        #[arg(long)]
        source: PathBuf,
        /// Target dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Adapted model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Adapt on a random fraction of the target images.
        #[arg(long)]
        fraction: Option<f64>,
        /// Repetition index selecting the random subset.
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// Override the β regularization weight.
        #[arg(long)]
        gamma: Option<f64>,
        /// Per-half-step adaptation log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Where to write the per-structure weights (default: next to the model).
        #[arg(long)]
        beta: Option<PathBuf>,
    },
    /// Run a model on every image of a manifest and dump detections as CSV.
    Detect {
        /// Model file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset manifest whose images are scanned.
        #[arg(long)]
        data: PathBuf,
        /// Detection CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Calibrate the threshold to this FPPI on the manifest's labels first.
        #[arg(long)]
        fppi: Option<f64>,
        /// Explicit score threshold.
        #[arg(long, conflicts_with = "fppi")]
        threshold: Option<f64>,
        /// Keep at most this many detections per image.
        #[arg(long)]
        max_per_image: Option<usize>,
    },
    /// FPPI / miss-rate evaluation of a detection CSV against a manifest.
    Eval {
        /// Detection CSV.
        #[arg(long)]
        detections: PathBuf,
        /// Dataset manifest with the ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the curve CSV, summary and SVG.
        #[arg(long)]
        out: PathBuf,
        /// Curve label in the outputs.
        #[arg(long, default_value = "detector")]
        label: String,
    },
    /// Run the SRC / TARX / TAR-ALL / SA-SSVM / MIX matrix.
    Experiment {
        /// Target fractions, e.g. --x 0.1 --x 0.5.
        #[arg(long)]
        x: Vec<f64>,
        /// Comma-separated modes, e.g. SRC,TARX,SA-SSVM.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct SynthConfig {
    source: Option<DomainSpec>,
    target: Option<DomainSpec>,
    size: BenchmarkSize,
}

/// The [train], [adapt] and [synth] tables of a config file; other keys
/// are ignored so an experiment config can be reused.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ToolConfig {
    train: TrainConfig,
    adapt: AdaptConfig,
    synth: SynthConfig,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(e) => e.exit_code() as u8,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn require(path: &Path, what: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn tool_config(cli: &Cli) -> Outcome<ToolConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p, "config")?;
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => ToolConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.sgd.seed = s;
        cfg.adapt.seed = s;
    }
    Ok(cfg)
}

fn dataset(path: &Path, name: &str) -> Outcome<Dataset> {
    require(path, "manifest")?;
    Ok(load_manifest(path, name, 0)?)
}

fn maybe_subset(data: Dataset, fraction: Option<f64>, seed: u64, repetition: usize) -> Outcome<Dataset> {
    match fraction {
        Some(x) => Ok(subset_images(
            &data,
            &SplitSpec {
                fraction: x,
                seed: rng::repetition_seed(seed, repetition),
            },
        )?),
        None => Ok(data),
    }
}

fn ensure_parent(path: &Path) -> Outcome<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(Error::from)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth {
            out,
            source,
            target,
            source_images,
            target_train_images,
            target_test_images,
            swap,
        } => {
            let cfg = tool_config(&cli)?;
            let (default_s, default_t) = synth::default_shift_pair();
            let load = |p: &Option<PathBuf>, fallback: Option<DomainSpec>, default: DomainSpec| -> Outcome<DomainSpec> {
                match p {
                    Some(p) => {
                        require(p, "domain spec")?;
                        Ok(DomainSpec::load(p)?)
                    }
                    None => Ok(fallback.unwrap_or(default)),
                }
            };
            let mut s = load(source, cfg.synth.source, default_s)?;
            let mut t = load(target, cfg.synth.target, default_t)?;
            if *swap {
                std::mem::swap(&mut s, &mut t);
            }
            if let Some(seed) = cli.seed {
                s.seed = rng::storable_seed(seed, 0);
                t.seed = rng::storable_seed(seed, 1);
            }
            let mut size = cfg.synth.size;
            size.source_images = source_images.unwrap_or(size.source_images);
            size.target_train_images = target_train_images.unwrap_or(size.target_train_images);
            size.target_test_images = target_test_images.unwrap_or(size.target_test_images);
            let b = synth::generate_benchmark(&s, &t, &size, out)?;
            for (d, dir) in [&b.source, &b.target_train, &b.target_test].into_iter().zip(synth::benchmark_dirs(out)) {
                println!("{}: {} images -> {}", d.name, d.len(), synth::manifest_path(&dir).display());
            }
        }
        Command::Train {
            data,
            out,
            fraction,
            repetition,
            log,
        } => {
            let cfg = tool_config(&cli)?;
            let d = maybe_subset(dataset(data, "train")?, *fraction, cfg.adapt.seed, *repetition)?;
            info!("training on {} images", d.len());
            let outcome = train(&d, &cfg.train)?;
            ensure_parent(out)?;
            model::save(&outcome.model, out)?;
            if let Some(p) = log {
                ensure_parent(p)?;
                let f = std::fs::File::create(p).map_err(Error::from)?;
                write_train_log(std::io::BufWriter::new(f), &outcome.log)?;
            }
            println!("model -> {} (threshold {})", out.display(), outcome.model.threshold);
        }
        Command::Adapt {
            source,
            data,
            out,
            fraction,
            repetition,
            gamma,
            log,
            beta,
        } => {
            let mut cfg = tool_config(&cli)?;
            if let Some(g) = gamma {
                cfg.adapt.gamma = *g;
            }
            require(source, "source model")?;
            let src = model::load(source)?;
            let d = maybe_subset(dataset(data, "target")?, *fraction, cfg.adapt.seed, *repetition)?;
            info!("adapting on {} images", d.len());
            let outcome = adapt(&src, &d, &cfg.adapt, &cfg.train)?;
            ensure_parent(out)?;
            model::save(&outcome.model, out)?;
            let beta_path = beta.clone().unwrap_or_else(|| out.with_extension("beta.csv"));
            save_beta(&beta_path, &outcome.beta, &outcome.partition)?;
            if let Some(p) = log {
                ensure_parent(p)?;
                let f = std::fs::File::create(p).map_err(Error::from)?;
                write_adapt_log(std::io::BufWriter::new(f), &outcome.log)?;
            }
            println!("model -> {}, beta -> {}", out.display(), beta_path.display());
        }
        Command::Detect {
            model: model_path,
            data,
            out,
            fppi,
            threshold,
            max_per_image,
        } => {
            let cfg = tool_config(&cli)?;
            require(model_path, "model")?;
            let mut m = model::load(model_path)?;
            let d = dataset(data, "detect")?;
            if let Some(f) = fppi {
                m.threshold = calibrate_threshold(&m, &d, &cfg.train.classes, d.len(), *f)?;
                info!("threshold calibrated to {} at FPPI {f}", m.threshold);
            }
            let opts = DetectOptions {
                threshold: threshold.or(Some(m.threshold)),
                nms_overlap: 0.5,
                max_detections: *max_per_image,
            };
            let mut records = Vec::new();
            for e in &d.entries {
                let image = e.load_image()?;
                let pyr = model_pyramid(&m, &image, &m.hog)?;
                for det in detect_in_pyramid(&pyr, &m, &opts)? {
                    records.push(DetectionRecord {
                        image_id: e.image_id(),
                        bbox: det.bbox,
                        score: det.score,
                        component: det.component_id,
                    });
                }
            }
            ensure_parent(out)?;
            let f = std::fs::File::create(out).map_err(Error::from)?;
            write_detections_csv(std::io::BufWriter::new(f), &records)?;
            println!("{} detections (threshold {}) -> {}", records.len(), opts.threshold.unwrap_or(m.threshold), out.display());
        }
        Command::Eval {
            detections,
            data,
            out,
            label,
        } => {
            let cfg = tool_config(&cli)?;
            require(detections, "detections")?;
            let d = dataset(data, "eval")?;
            let f = std::fs::File::open(detections).map_err(Error::from)?;
            let records = read_detections_csv(std::io::BufReader::new(f))?;
            let dets = group_records(&records, &d)?;
            let c = curve(&dets, &ground_truth(&d, &cfg.train.classes))?;
            let agg = aggregate(label, std::slice::from_ref(&c))?;
            emit(out, "eval", label, &[agg])?;
            let f = std::fs::File::create(out.join("eval_points.csv")).map_err(Error::from)?;
            eval::write_points_csv(std::io::BufWriter::new(f), &c)?;
            println!("log-average MR {:.4}, mean MR {:.4}", log_average_mr(&c), mean_mr(&c));
        }
        Command::Experiment { x, modes, out } => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Failure::Usage("experiment needs --config".into()))?;
            require(path, "config")?;
            let mut cfg = ExperimentConfig::load(path)?;
            if !x.is_empty() {
                cfg.x = x.clone();
            }
            if !modes.is_empty() {
                cfg.modes = modes.iter().map(|m| m.parse::<Mode>()).collect::<Result<_, _>>()?;
            }
            if let Some(o) = out {
                cfg.output = o.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
                cfg.train.sgd.seed = s;
            }
            for p in [&cfg.source, &cfg.source_model, &cfg.target_train].into_iter().flatten() {
                require(p, "input")?;
            }
            require(&cfg.target_test, "target_test manifest")?;
            let report = experiment::run(&cfg)?;
            for f in &report.figures {
                for c in &f.curves {
                    println!("X={} {}: log-average MR {:.4} ± {:.4}", f.x, c.label, c.log_average(), c.log_average_std());
                }
            }
            println!("results -> {}", cfg.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
