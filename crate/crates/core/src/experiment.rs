//! The experiment matrix: source-only, target-only, adapted and mixed
//! detectors evaluated on a common target test set.
//!
//! Every trained model lives in its own cell directory under
//! `<output>/cells/`. A cell is reused when its stored key matches the
//! current configuration and input hashes, so an interrupted run resumes
//! where it stopped and a finished run can be repeated for free.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{adapt, save_beta, write_adapt_log, AdaptConfig};
use crate::data::{load_manifest, subset_images, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{aggregate, detect_dataset, emit, evaluation_options, ground_truth, curve, read_points_csv, write_points_csv, AggregateCurve, FppiMrCurve};
use crate::model::{self, DpmModel};
use crate::rng;
use crate::train::{train, write_train_log, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "SRC")]
    Src,
    #[serde(rename = "TARX")]
    TarX,
    #[serde(rename = "TAR-ALL")]
    TarAll,
    #[serde(rename = "SA-SSVM")]
    SaSsvm,
    #[serde(rename = "MIX")]
    Mix,
}

impl Mode {
    pub fn needs_target(self) -> bool {
        !matches!(self, Mode::Src)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SRC" => Ok(Mode::Src),
            "TARX" => Ok(Mode::TarX),
            "TAR-ALL" => Ok(Mode::TarAll),
            "SA-SSVM" => Ok(Mode::SaSsvm),
            "MIX" => Ok(Mode::Mix),
            _ => Err(Error::Config(format!("unknown mode {s}; expected SRC, TARX, TAR-ALL, SA-SSVM or MIX"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Source training manifest.
    pub source: Option<PathBuf>,
    /// Trained source model used by SA-SSVM instead of the SRC cell.
    pub source_model: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: PathBuf,
    /// Fractions of the target training images.
    pub x: Vec<f64>,
    pub modes: Vec<Mode>,
    pub output: PathBuf,
    /// Master seed of the target subsets.
    pub seed: u64,
    /// Detections kept per test image when sweeping the curve.
    pub eval_detections_per_image: usize,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: None,
            source_model: None,
            target_train: None,
            target_test: PathBuf::new(),
            x: vec![0.1],
            modes: vec![Mode::Src, Mode::TarX, Mode::TarAll, Mode::SaSsvm],
            output: PathBuf::from("experiment"),
            seed: 1,
            eval_detections_per_image: 100,
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("no modes selected".into()));
        }
        if self.target_test.as_os_str().is_empty() {
            return Err(Error::Config("target_test manifest is required".into()));
        }
        if self.modes.iter().any(|m| m.needs_target()) && self.target_train.is_none() {
            return Err(Error::Config("modes other than SRC need target_train".into()));
        }
        let needs_source_data = self.modes.iter().any(|m| matches!(m, Mode::Src | Mode::Mix))
            || (self.modes.contains(&Mode::SaSsvm) && self.source_model.is_none());
        if needs_source_data && self.source.is_none() {
            return Err(Error::Config("SRC, MIX and SA-SSVM without source_model need a source manifest".into()));
        }
        if self.x.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Config(format!("target fractions must lie in (0, 1], got {:?}", self.x)));
        }
        if self.eval_detections_per_image == 0 {
            return Err(Error::Config("eval_detections_per_image must be at least 1".into()));
        }
        self.train.validate()?;
        self.adapt.validate()
    }

    /// Parse a TOML config; relative paths are taken from the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.source, &mut cfg.source_model, &mut cfg.target_train].into_iter().flatten() {
            fix(p);
        }
        fix(&mut cfg.target_test);
        fix(&mut cfg.output);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of everything that influences results; the output directory is
    /// excluded.
    pub fn content_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Content hash of a dataset: every image's bytes and annotations in
/// manifest order.
pub fn dataset_hash(d: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for e in &d.entries {
        let bytes = std::fs::read(&e.image_path)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        h.update(format!("{:?}", e.annotations).as_bytes());
    }
    Ok(hex(&h.finalize()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// One trained model of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub x: Option<f64>,
    pub repetition: Option<usize>,
    pub subset_seed: Option<u64>,
}

impl Cell {
    pub fn name(&self) -> String {
        let base = match self.mode {
            Mode::Src => "src".to_string(),
            Mode::TarAll => "tar-all".to_string(),
            Mode::TarX => format!("tar{}", self.x.unwrap_or(1.0)),
            Mode::SaSsvm => format!("sa-ssvm{}", self.x.unwrap_or(1.0)),
            Mode::Mix => format!("mix{}", self.x.unwrap_or(1.0)),
        };
        match self.repetition {
            Some(r) => format!("{base}-r{r}"),
            None => base,
        }
    }

    /// Curve label of the experiment this cell belongs to.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Src => "SRC".into(),
            Mode::TarAll => "TAR-ALL".into(),
            Mode::TarX => format!("TAR{}", self.x.unwrap_or(1.0)),
            Mode::SaSsvm => "SA-SSVM".into(),
            Mode::Mix => "MIX".into(),
        }
    }
}

/// Cells of the matrix in run order. SRC is included whenever SA-SSVM needs
/// it as its source model.
pub fn plan(cfg: &ExperimentConfig) -> Vec<Cell> {
    let has = |m| cfg.modes.contains(&m);
    let mut cells = Vec::new();
    if has(Mode::Src) || (has(Mode::SaSsvm) && cfg.source_model.is_none()) {
        cells.push(Cell {
            mode: Mode::Src,
            x: None,
            repetition: None,
            subset_seed: None,
        });
    }
    if has(Mode::TarAll) {
        cells.push(Cell {
            mode: Mode::TarAll,
            x: None,
            repetition: None,
            subset_seed: None,
        });
    }
    for &x in &cfg.x {
        for mode in [Mode::TarX, Mode::SaSsvm, Mode::Mix] {
            if !has(mode) {
                continue;
            }
            for r in 0..cfg.adapt.repetitions {
                cells.push(Cell {
                    mode,
                    x: Some(x),
                    repetition: Some(r),
                    subset_seed: Some(rng::repetition_seed(cfg.seed, r)),
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub images: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub name: String,
    pub key: String,
    pub subset_seed: Option<u64>,
    pub subset_images: Option<usize>,
    pub model_sha256: String,
}

/// Written to `<output>/manifest.toml`; enough to rerun the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub sgd_seed: u64,
    pub inputs: Vec<InputRecord>,
    pub cells: Vec<CellRecord>,
}

/// Curves of one figure: one target fraction.
#[derive(Debug, Clone)]
pub struct Figure {
    pub x: f64,
    pub curves: Vec<AggregateCurve>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub figures: Vec<Figure>,
    pub manifest: RunManifest,
}

struct Inputs {
    source: Option<Dataset>,
    target_train: Option<Dataset>,
    target_test: Dataset,
    records: Vec<InputRecord>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let mut records = Vec::new();
    let mut load = |role: &str, path: &Path| -> Result<Dataset> {
        let d = load_manifest(path, role, cfg.seed)?;
        records.push(InputRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            images: d.len(),
            sha256: dataset_hash(&d)?,
        });
        Ok(d)
    };
    let source = cfg.source.as_deref().map(|p| load("source", p)).transpose()?;
    let target_train = cfg.target_train.as_deref().map(|p| load("target_train", p)).transpose()?;
    let target_test = load("target_test", &cfg.target_test)?;
    if let Some(p) = &cfg.source_model {
        records.push(InputRecord {
            role: "source_model".into(),
            path: p.clone(),
            images: 0,
            sha256: file_hash(p)?,
        });
    }
    Ok(Inputs {
        source,
        target_train,
        target_test,
        records,
    })
}

const MODEL_FILE: &str = "model.dpm";
const CELL_FILE: &str = "cell.toml";
const CURVE_FILE: &str = "curve.csv";

fn read_cell_record(dir: &Path) -> Option<CellRecord> {
    let text = std::fs::read_to_string(dir.join(CELL_FILE)).ok()?;
    toml::from_str(&text).ok()
}

/// Write `bytes` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn need<'a>(d: &'a Option<Dataset>, what: &str) -> Result<&'a Dataset> {
    d.as_ref().ok_or_else(|| Error::Config(format!("{what} dataset is required")))
}

fn train_cell(cell: &Cell, cfg: &ExperimentConfig, inputs: &Inputs, source_model: Option<&DpmModel>, dir: &Path) -> Result<(DpmModel, Option<usize>)> {
    let subset = |x: f64, seed: u64| -> Result<Dataset> {
        subset_images(need(&inputs.target_train, "target_train")?, &SplitSpec { fraction: x, seed })
    };
    let write_log = |name: &str, rows: &[crate::train::TrainLogRow]| -> Result<()> {
        let mut buf = Vec::new();
        write_train_log(&mut buf, rows)?;
        std::fs::write(dir.join(name), buf)?;
        Ok(())
    };
    match cell.mode {
        Mode::Src => {
            let out = train(need(&inputs.source, "source")?, &cfg.train)?;
            write_log("train_log.csv", &out.log)?;
            Ok((out.model, None))
        }
        Mode::TarAll => {
            let out = train(need(&inputs.target_train, "target_train")?, &cfg.train)?;
            write_log("train_log.csv", &out.log)?;
            Ok((out.model, None))
        }
        Mode::TarX => {
            let data = subset(cell.x.unwrap_or(1.0), cell.subset_seed.unwrap_or(cfg.seed))?;
            let out = train(&data, &cfg.train)?;
            write_log("train_log.csv", &out.log)?;
            Ok((out.model, Some(data.len())))
        }
        Mode::Mix => {
            let data = subset(cell.x.unwrap_or(1.0), cell.subset_seed.unwrap_or(cfg.seed))?;
            let mixed = Dataset::concat("mix", &[need(&inputs.source, "source")?, &data])?;
            let out = train(&mixed, &cfg.train)?;
            write_log("train_log.csv", &out.log)?;
            Ok((out.model, Some(data.len())))
        }
        Mode::SaSsvm => {
            let data = subset(cell.x.unwrap_or(1.0), cell.subset_seed.unwrap_or(cfg.seed))?;
            let src = source_model.ok_or_else(|| Error::Config("SA-SSVM needs a source model".into()))?;
            let out = adapt(src, &data, &cfg.adapt, &cfg.train)?;
            let mut buf = Vec::new();
            write_adapt_log(&mut buf, &out.log)?;
            std::fs::write(dir.join("adapt_log.csv"), buf)?;
            save_beta(&dir.join("beta.csv"), &out.beta, &out.partition)?;
            Ok((out.model, Some(data.len())))
        }
    }
}

/// Run (or resume) the experiment matrix and emit one figure per target
/// fraction.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let config_hash = cfg.content_hash()?;
    let inputs = load_inputs(cfg)?;
    let cells_dir = cfg.output.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    std::fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;

    let mut key_base = config_hash.clone();
    for r in &inputs.records {
        key_base.push_str(&r.sha256);
    }
    let cells = plan(cfg);
    let mut records = Vec::new();
    let mut models: BTreeMap<String, DpmModel> = BTreeMap::new();
    let mut source_model = cfg.source_model.as_deref().map(model::load).transpose()?;

    for cell in &cells {
        let name = cell.name();
        let dir = cells_dir.join(&name);
        let key = sha256_hex(format!("{key_base}/{name}").as_bytes());
        let model = match read_cell_record(&dir) {
            Some(rec) if rec.key == key && dir.join(MODEL_FILE).exists() => {
                info!("cell {name}: reusing");
                records.push(rec);
                model::load(&dir.join(MODEL_FILE))?
            }
            _ => {
                info!("cell {name}: training");
                let tmp = cells_dir.join(format!(".{name}.tmp"));
                if tmp.exists() {
                    std::fs::remove_dir_all(&tmp)?;
                }
                std::fs::create_dir_all(&tmp)?;
                let (m, subset_images) = train_cell(cell, cfg, &inputs, source_model.as_ref(), &tmp)?;
                let bytes = model::to_bytes(&m);
                std::fs::write(tmp.join(MODEL_FILE), &bytes)?;
                let rec = CellRecord {
                    name: name.clone(),
                    key,
                    subset_seed: cell.subset_seed,
                    subset_images,
                    model_sha256: sha256_hex(&bytes),
                };
                std::fs::write(tmp.join(CELL_FILE), toml::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?)?;
                if dir.exists() {
                    std::fs::remove_dir_all(&dir)?;
                }
                std::fs::rename(&tmp, &dir)?;
                records.push(rec);
                m
            }
        };
        if cell.mode == Mode::Src && source_model.is_none() {
            source_model = Some(model.clone());
        }
        models.insert(name, model);
    }

    let curves = evaluate_cells(cfg, &cells, &models, &inputs.target_test, &cells_dir)?;
    let figures = assemble_figures(cfg, &cells, &curves)?;
    for f in &figures {
        let stem = format!("x{}", f.x);
        emit(&cfg.output, &stem, &format!("Target test, X = {}", f.x), &f.curves)?;
    }

    let manifest = RunManifest {
        config_sha256: config_hash,
        seed: cfg.seed,
        sgd_seed: cfg.train.sgd.seed,
        inputs: inputs.records,
        cells: records,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&cfg.output.join("manifest.toml"), text.as_bytes())?;
    Ok(ExperimentReport { figures, manifest })
}

/// Curves of every cell on the target test set. Cells with a stored curve
/// reuse it; the rest are detected together, sharing one pyramid per image.
fn evaluate_cells(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    models: &BTreeMap<String, DpmModel>,
    test: &Dataset,
    cells_dir: &Path,
) -> Result<BTreeMap<String, FppiMrCurve>> {
    let mut out = BTreeMap::new();
    let mut pending = Vec::new();
    for cell in cells {
        let name = cell.name();
        let path = cells_dir.join(&name).join(CURVE_FILE);
        match std::fs::File::open(&path) {
            Ok(f) => {
                out.insert(name, read_points_csv(std::io::BufReader::new(f))?);
            }
            Err(_) => pending.push(name),
        }
    }
    if !pending.is_empty() {
        info!("evaluating {} models on {} test images", pending.len(), test.len());
        let ms: Vec<&DpmModel> = pending.iter().map(|n| &models[n]).collect();
        let dets = detect_dataset(&ms, test, &evaluation_options(cfg.eval_detections_per_image))?;
        let gts = ground_truth(test, &cfg.train.classes);
        for (name, d) in pending.into_iter().zip(dets) {
            let c = curve(&d, &gts)?;
            let mut buf = Vec::new();
            write_points_csv(&mut buf, &c)?;
            write_atomic(&cells_dir.join(&name).join(CURVE_FILE), &buf)?;
            out.insert(name, c);
        }
    }
    Ok(out)
}

fn assemble_figures(cfg: &ExperimentConfig, cells: &[Cell], curves: &BTreeMap<String, FppiMrCurve>) -> Result<Vec<Figure>> {
    let runs = |pred: &dyn Fn(&Cell) -> bool| -> (Option<String>, Vec<FppiMrCurve>) {
        let picked: Vec<&Cell> = cells.iter().filter(|c| pred(c)).collect();
        let label = picked.first().map(|c| c.label());
        (label, picked.iter().map(|c| curves[&c.name()].clone()).collect())
    };
    let mut figures = Vec::new();
    for &x in &cfg.x {
        let mut agg = Vec::new();
        let order = [Mode::Src, Mode::TarX, Mode::SaSsvm, Mode::Mix, Mode::TarAll];
        for mode in order {
            if !cfg.modes.contains(&mode) {
                continue;
            }
            let (label, cs) = runs(&|c: &Cell| c.mode == mode && (c.x.is_none() || c.x == Some(x)));
            if let Some(label) = label {
                agg.push(aggregate(&label, &cs)?);
            }
        }
        figures.push(Figure { x, curves: agg });
    }
    Ok(figures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            source: Some("s.tsv".into()),
            target_train: Some("t.tsv".into()),
            target_test: "test.tsv".into(),
            modes: vec![Mode::Src, Mode::TarX, Mode::TarAll, Mode::SaSsvm, Mode::Mix],
            x: vec![0.1, 0.5],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn plan_covers_the_matrix() {
        let names: Vec<String> = plan(&cfg()).iter().map(Cell::name).collect();
        assert_eq!(names.len(), 2 + 2 * 3 * 3);
        assert_eq!(&names[..5], ["src", "tar-all", "tar0.1-r0", "tar0.1-r1", "tar0.1-r2"]);
        assert!(names.contains(&"sa-ssvm0.5-r2".to_string()));
    }

    #[test]
    fn repetitions_share_subset_seeds_across_modes() {
        let cells = plan(&cfg());
        let seed = |name: &str| cells.iter().find(|c| c.name() == name).unwrap().subset_seed;
        assert_eq!(seed("tar0.1-r1"), seed("sa-ssvm0.1-r1"));
        assert_eq!(seed("tar0.1-r1"), seed("mix0.5-r1"));
        assert_ne!(seed("tar0.1-r0"), seed("tar0.1-r1"));
    }

    #[test]
    fn source_cell_is_added_for_adaptation() {
        let c = ExperimentConfig {
            modes: vec![Mode::SaSsvm],
            ..cfg()
        };
        assert_eq!(plan(&c)[0].name(), "src");
        let c = ExperimentConfig {
            source_model: Some("m.dpm".into()),
            ..c
        };
        assert!(plan(&c).iter().all(|c| c.mode == Mode::SaSsvm));
    }

    #[test]
    fn validation_catches_missing_inputs() {
        let mut c = cfg();
        c.target_train = None;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.source = None;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.x = vec![0.0];
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn config_round_trips_and_hash_ignores_output() {
        let c = cfg();
        let text = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let moved = ExperimentConfig {
            output: "elsewhere".into(),
            ..c.clone()
        };
        assert_eq!(moved.content_hash().unwrap(), c.content_hash().unwrap());
        let other = ExperimentConfig { seed: 9, ..c.clone() };
        assert_ne!(other.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn modes_parse_by_name() {
        assert_eq!("SA-SSVM".parse::<Mode>().unwrap(), Mode::SaSsvm);
        assert!("sa-ssvm".parse::<Mode>().is_err());
    }
}
