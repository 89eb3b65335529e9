//! Experiment configuration, presets and the command implementations
//! behind the `qcml` binary.
//!
//! Every command is a pure function of its configuration and input files.
//! Outputs go to `<output_dir>/<command>-<config hash prefix>/` together
//! with a `manifest.json` listing the config hash, seed, crate version and
//! the SHA-256 of every artifact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{euclidean_proximity, fit_linear, LinearModel};
use crate::codec::write_file;
use crate::data::{apply_scaling, fit_scaling, load_csv, parse_csv, synth_bonds, Dataset, FeatureSchema, Regime};
use crate::error::{QcmlError, Result};
use crate::eval::{
    curves_csv, cv_hilbert_dim, knn_curve_experiment, knn_predict, regression_csv, regression_experiment,
    split, top_neighbors, write_json, KnnCurve, KnnExperiment, ProximitySetup, RegressionModel,
    RegressionSummary, Weighting,
};
use crate::forest::{fit_forest, Forest, ForestConfig, ProxRows};
use crate::mds::{coordinates_csv, distance_histogram, mds_embed, render_scatter, DistanceMatrix, Highlight, MdsConfig};
use crate::model::{qcml_proximity_matrix, train_ensemble, QcmlModel, TrainConfig};
use crate::proximity::{ProximityMatrix, ProximityMetric, Role};
use crate::seed::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;

const DIABETES_CSV: &str = include_str!("../data/diabetes.csv");
const DIABETES_SCHEMA: &str = include_str!("../data/diabetes.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic {
        regime: Regime,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Builtin { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Qcml,
    Forest,
    Linear,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    /// Empty disables cross-validation.
    pub candidate_dims: Vec<usize>,
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            candidate_dims: Vec::new(),
            folds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub test_fraction: f64,
    pub n_splits: usize,
    pub ks: Vec<usize>,
    pub weightings: Vec<Weighting>,
    pub metrics: Vec<ProximityMetric>,
    pub histogram_bins: usize,
    /// Training point whose neighbors are reported and highlighted.
    pub reference_index: usize,
    pub top_k: usize,
    pub regression: bool,
    pub knn: bool,
    pub figures: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            n_splits: 10,
            ks: (1..=100).collect(),
            weightings: vec![Weighting::Unweighted, Weighting::Proximity],
            metrics: ProximityMetric::ALL.to_vec(),
            histogram_bins: 20,
            reference_index: 0,
            top_k: 10,
            regression: true,
            knn: true,
            figures: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_ensemble() -> usize {
    3
}

fn default_models() -> Vec<ModelChoice> {
    vec![ModelChoice::All]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default = "default_models")]
    pub models: Vec<ModelChoice>,
    #[serde(default)]
    pub qcml: TrainConfig,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    /// Named forest hyperparameters (`hyg`, `igsb`); replaces `forest` when set.
    #[serde(default)]
    pub forest_preset: Option<String>,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub mds: MdsConfig,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |dataset, qcml: TrainConfig, forest_preset: Option<&str>| Self {
            seed: 0,
            output_dir: default_output_dir(),
            dataset,
            models: default_models(),
            qcml,
            ensemble_size: 3,
            forest_preset: forest_preset.map(str::to_string),
            forest: ForestConfig::default(),
            cv: CvConfig::default(),
            evaluation: EvaluationConfig::default(),
            mds: MdsConfig::default(),
        };
        match name {
            "diabetes" => Ok(base(
                DatasetSource::Builtin {
                    name: "diabetes".into(),
                },
                TrainConfig {
                    hilbert_dim: 4,
                    learning_rate: 0.003,
                    ..TrainConfig::default()
                },
                None,
            )),
            "hyg" => Ok(base(
                DatasetSource::Synthetic {
                    regime: Regime::HighYield,
                    n: 600,
                    seed: 0,
                },
                TrainConfig {
                    hilbert_dim: 7,
                    ..TrainConfig::default()
                },
                Some("hyg"),
            )),
            "igsb" => Ok(base(
                DatasetSource::Synthetic {
                    regime: Regime::InvestmentGrade,
                    n: 600,
                    seed: 0,
                },
                TrainConfig {
                    hilbert_dim: 12,
                    ..TrainConfig::default()
                },
                Some("igsb"),
            )),
            _ => Err(QcmlError::config("preset", format!("unknown preset `{name}`"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| QcmlError::config("<toml>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| QcmlError::config(e.path().to_string(), e.inner().to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de)
            .map_err(|e| QcmlError::config(e.path().to_string(), e.inner().to_string()))
    }

    /// Reads TOML or JSON by extension; relative dataset paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QcmlError::io(path, e))?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text)?,
            _ => Self::from_toml_str(&text)?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { path, schema } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if schema.is_relative() {
                *schema = base.join(&*schema);
            }
        }
        Ok(cfg)
    }

    /// Applies the forest preset and derives every sub-seed from the master seed.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if let Some(name) = &cfg.forest_preset {
            cfg.forest = ForestConfig::preset(name)
                .ok_or_else(|| QcmlError::config("forest_preset", format!("unknown forest preset `{name}`")))?;
        }
        cfg.qcml.seed = derive_seed(cfg.seed, 1);
        cfg.forest.seed = derive_seed(cfg.seed, 2);
        cfg.mds.seed = derive_seed(cfg.seed, 3);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.qcml.validate()?;
        self.forest.validate()?;
        if self.ensemble_size < 1 {
            return Err(QcmlError::config("ensemble_size", "must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(QcmlError::config("models", "select at least one model"));
        }
        let e = &self.evaluation;
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(QcmlError::config("evaluation.test_fraction", "must lie strictly between 0 and 1"));
        }
        if e.n_splits < 2 {
            return Err(QcmlError::config("evaluation.n_splits", "must be at least 2"));
        }
        if e.top_k < 1 {
            return Err(QcmlError::config("evaluation.top_k", "must be at least 1"));
        }
        if e.histogram_bins < 1 {
            return Err(QcmlError::config("evaluation.histogram_bins", "must be at least 1"));
        }
        if let DatasetSource::Csv { path, schema } = &self.dataset {
            for (field, p) in [("dataset.path", path), ("dataset.schema", schema)] {
                if !p.exists() {
                    return Err(QcmlError::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        if let DatasetSource::Builtin { name } = &self.dataset {
            if name != "diabetes" {
                return Err(QcmlError::config("dataset.name", format!("unknown builtin dataset `{name}`")));
            }
        }
        if self.cv.candidate_dims.contains(&0) {
            return Err(QcmlError::config("cv.candidate_dims", "dimensions must be at least 1"));
        }
        Ok(())
    }

    pub fn regression_models(&self) -> Vec<RegressionModel> {
        let all = self.models.contains(&ModelChoice::All);
        [
            (ModelChoice::Linear, RegressionModel::Linear),
            (ModelChoice::Forest, RegressionModel::Forest),
            (ModelChoice::Qcml, RegressionModel::Qcml),
        ]
        .into_iter()
        .filter(|(c, _)| all || self.models.contains(c))
        .map(|(_, m)| m)
        .collect()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn setup(&self) -> ProximitySetup {
        ProximitySetup {
            qcml: self.qcml.clone(),
            ensemble_size: self.ensemble_size,
            forest: self.forest.clone(),
        }
    }

    pub fn split_seeds(&self) -> Vec<u64> {
        (0..self.evaluation.n_splits as u64).collect()
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Csv { path, schema } => load_csv(path, &FeatureSchema::load(schema)?),
        DatasetSource::Synthetic { regime, n, seed } => synth_bonds(*seed, *n, *regime),
        DatasetSource::Builtin { name } if name == "diabetes" => {
            parse_csv(DIABETES_CSV.as_bytes(), &FeatureSchema::from_json_str(DIABETES_SCHEMA)?)
        }
        DatasetSource::Builtin { name } => Err(QcmlError::config("dataset.name", format!("unknown builtin `{name}`"))),
    }
}

/// Files written by one command run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct RunWriter {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl RunWriter {
    fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = cfg.output_dir.join(format!("{command}-{}", &cfg.hash()[..12]));
        std::fs::create_dir_all(&dir).map_err(|e| QcmlError::io(&dir, e))?;
        Ok(Self {
            dir,
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| QcmlError::data(format!("json encoding failed: {e}")))?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    fn finish(mut self, cfg: &ExperimentConfig, command: &str) -> Result<RunOutput> {
        #[derive(Serialize)]
        struct Entry<'a> {
            path: &'a str,
            sha256: &'a str,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            format_version: u32,
            command: &'a str,
            crate_version: &'a str,
            config_sha256: String,
            seed: u64,
            files: Vec<Entry<'a>>,
        }
        self.files.sort();
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            command,
            crate_version: env!("CARGO_PKG_VERSION"),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            files: self
                .files
                .iter()
                .map(|(p, h)| Entry { path: p, sha256: h })
                .collect(),
        };
        write_json(&self.dir.join("manifest.json"), &manifest)?;
        let mut files: Vec<PathBuf> = self.files.iter().map(|(p, _)| self.dir.join(p)).collect();
        files.push(self.dir.join("manifest.json"));
        Ok(RunOutput {
            dir: self.dir,
            files,
        })
    }
}

/// Training split (first split seed) with the scaler applied.
fn scaled_split(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(data, cfg.evaluation.test_fraction, 0)?;
    let scaler = fit_scaling(&train)?;
    Ok((apply_scaling(&scaler, &train)?, apply_scaling(&scaler, &test)?))
}

#[derive(Serialize)]
struct CvRow {
    hilbert_dim: usize,
    mean_mse: Option<f64>,
    failure: Option<String>,
}

/// Runs CV if candidate dimensions are configured, then fits the selected
/// models on the training split of seed 0 and persists them.
pub fn cmd_train(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = config.resolved()?;
    let data = load_dataset(&cfg.dataset)?;
    let (train, _) = scaled_split(&cfg, &data)?;
    let mut out = RunWriter::new(&cfg, "train")?;
    out.put_json("config.json", &cfg)?;
    let models = cfg.regression_models();

    if models.contains(&RegressionModel::Qcml) {
        let mut qcfg = cfg.qcml.clone();
        if !cfg.cv.candidate_dims.is_empty() {
            let report = cv_hilbert_dim(train.x(), train.y(), &cfg.cv.candidate_dims, cfg.cv.folds, &qcfg)?;
            let mut csv = String::from("hilbert_dim,mean_mse,failure\n");
            for ((d, m), f) in report.candidates.iter().zip(&report.mean_mse).zip(&report.failures) {
                let _ = writeln!(
                    csv,
                    "{d},{},{}",
                    m.map_or(String::new(), |v| v.to_string()),
                    f.clone().unwrap_or_default().replace(',', ";")
                );
            }
            out.put("cv.csv", csv.as_bytes())?;
            out.put_json(
                "cv.json",
                &report
                    .candidates
                    .iter()
                    .zip(&report.mean_mse)
                    .zip(&report.failures)
                    .map(|((&d, &m), f)| CvRow {
                        hilbert_dim: d,
                        mean_mse: m,
                        failure: f.clone(),
                    })
                    .collect::<Vec<_>>(),
            )?;
            info!("cv selected hilbert_dim = {}", report.selected);
            qcfg.hilbert_dim = report.selected;
        }
        let trained = train_ensemble(&qcfg, cfg.ensemble_size, train.x(), train.y())?;
        let mut trace = String::from("member,epoch,loss\n");
        for (m, t) in trained.iter().enumerate() {
            out.put(&format!("qcml-{m}.model"), &t.model.to_bytes())?;
            for (e, l) in t.loss_trace.iter().enumerate() {
                let _ = writeln!(trace, "{m},{e},{l}");
            }
        }
        out.put("loss_trace.csv", trace.as_bytes())?;
    }
    if models.contains(&RegressionModel::Forest) {
        info!(
            "forest: {} trees, depth {}, min leaf {}, {:?} features, {:?} criterion",
            cfg.forest.n_trees,
            cfg.forest.max_depth,
            cfg.forest.min_samples_leaf,
            cfg.forest.max_features,
            cfg.forest.criterion
        );
        let forest = fit_forest(&cfg.forest, train.x(), train.y())?;
        out.put("forest.bin", &forest.to_bytes())?;
    }
    if models.contains(&RegressionModel::Linear) {
        let lin = fit_linear(train.x(), train.y())?;
        out.put_json("linear.json", &lin)?;
    }
    out.finish(&cfg, "train")
}

/// Models persisted by [`cmd_train`].
pub struct TrainedArtifacts {
    pub qcml: Vec<QcmlModel>,
    pub forest: Option<Forest>,
    pub linear: Option<LinearModel>,
}

pub fn load_artifacts(dir: &Path) -> Result<TrainedArtifacts> {
    let mut qcml = Vec::new();
    for m in 0.. {
        let p = dir.join(format!("qcml-{m}.model"));
        if !p.exists() {
            break;
        }
        qcml.push(QcmlModel::load(&p)?);
    }
    let fp = dir.join("forest.bin");
    let forest = if fp.exists() { Some(Forest::load(&fp)?) } else { None };
    let lp = dir.join("linear.json");
    let linear = if lp.exists() {
        let text = std::fs::read_to_string(&lp).map_err(|e| QcmlError::io(&lp, e))?;
        Some(serde_json::from_str(&text).map_err(|e| QcmlError::Format(format!("linear.json: {e}")))?)
    } else {
        None
    };
    Ok(TrainedArtifacts { qcml, forest, linear })
}

/// Writes test-by-train and train-by-train proximity files for each metric
/// using models from a [`cmd_train`] run directory.
pub fn cmd_proximity(config: &ExperimentConfig, models_dir: &Path, metrics: &[ProximityMetric]) -> Result<RunOutput> {
    let cfg = config.resolved()?;
    let data = load_dataset(&cfg.dataset)?;
    let (train, test) = scaled_split(&cfg, &data)?;
    let art = load_artifacts(models_dir)?;
    let mut out = RunWriter::new(&cfg, "proximity")?;
    let train_idx: Vec<usize> = (0..train.len()).collect();

    for &metric in metrics {
        let pair = match metric {
            ProximityMetric::Qcml => {
                if art.qcml.is_empty() {
                    return Err(QcmlError::usage(format!("no QCML models in {}", models_dir.display())));
                }
                if let Some(m) = art.qcml.iter().find(|m| m.n_features() != train.width()) {
                    return Err(QcmlError::schema(format!(
                        "model expects {} features, dataset encodes {}",
                        m.n_features(),
                        train.width()
                    )));
                }
                (
                    qcml_proximity_matrix(&art.qcml, test.x(), train.x(), Role::Test, Role::Train)?,
                    qcml_proximity_matrix(&art.qcml, train.x(), train.x(), Role::Train, Role::Train)?,
                )
            }
            ProximityMetric::Euclidean => (
                euclidean_proximity(train.x(), test.x(), Role::Test)?,
                euclidean_proximity(train.x(), train.x(), Role::Train)?,
            ),
            rf => {
                let forest = art
                    .forest
                    .as_ref()
                    .ok_or_else(|| QcmlError::usage(format!("no forest in {}", models_dir.display())))?;
                if forest.n_features() != train.width() || forest.n_train() != train.len() {
                    return Err(QcmlError::schema("forest does not match the dataset's training split"));
                }
                forest_pair(forest, rf, test.x(), &train_idx)?
            }
        };
        if metric == ProximityMetric::RfGap {
            let worst = pair
                .1
                .row_sums()
                .iter()
                .chain(&pair.0.row_sums())
                .map(|s| (s - 1.0).abs())
                .fold(0.0, f64::max);
            info!("rf-gap row sums: max |sum − 1| = {worst:e}");
        }
        out.put(&format!("{}-test-train.qprx", metric.name()), &pair.0.to_bytes())?;
        out.put(&format!("{}-train-train.qprx", metric.name()), &pair.1.to_bytes())?;
    }
    out.finish(&cfg, "proximity")
}

fn forest_pair(
    forest: &Forest,
    metric: ProximityMetric,
    test_x: &[Vec<f64>],
    train_idx: &[usize],
) -> Result<(ProximityMatrix, ProximityMatrix)> {
    let q = ProxRows::Query(test_x);
    let t = ProxRows::Train(train_idx);
    Ok(match metric {
        ProximityMetric::RfBreiman => (forest.prox_breiman(q)?, forest.prox_breiman(t)?),
        ProximityMetric::RfOob => (forest.prox_oob_matrix(q)?, forest.prox_oob_matrix(t)?),
        ProximityMetric::RfGap => (forest.prox_gap(q)?, forest.prox_gap(t)?),
        _ => unreachable!("not a forest metric"),
    })
}

#[derive(Serialize)]
struct NeighborReport {
    metric: ProximityMetric,
    reference_index: usize,
    reference_target: f64,
    neighbors: Vec<usize>,
    neighbor_targets: Vec<f64>,
    proximities: Vec<f64>,
    knn_estimate: f64,
}

#[derive(Serialize)]
struct EvaluationSummary<'a> {
    format_version: u32,
    regression: &'a [RegressionSummary],
    knn_curves: &'a [KnnCurve],
    median_average_distance: Vec<(ProximityMetric, f64)>,
    mds_stress: Vec<(ProximityMetric, f64)>,
}

/// Regression table, KNN curves, distance histograms, MDS scatters and the
/// reference-point neighbor report.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = config.resolved()?;
    let data = load_dataset(&cfg.dataset)?;
    let mut out = RunWriter::new(&cfg, "evaluate")?;
    out.put_json("config.json", &cfg)?;
    let seeds = cfg.split_seeds();
    let e = &cfg.evaluation;

    let mut regression = Vec::new();
    if e.regression {
        regression = regression_experiment(&data, &cfg.regression_models(), &seeds, e.test_fraction, &cfg.setup())?;
        out.put("regression.csv", &regression_csv(&regression, &seeds)?)?;
        let mut table = String::from("model,mape,mae,rmse,r2\n");
        for r in &regression {
            let _ = writeln!(
                table,
                "{},{},{:.6} ± {:.6},{:.6} ± {:.6},{:.6} ± {:.6}",
                r.model.name(),
                r.mape
                    .as_ref()
                    .map_or("divergent".to_string(), |m| format!("{:.6} ± {:.6}", m.mean, m.std)),
                r.mae.mean,
                r.mae.std,
                r.rmse.mean,
                r.rmse.std,
                r.r2.mean,
                r.r2.std
            );
        }
        out.put("regression_table.csv", table.as_bytes())?;
    }

    let mut curves = Vec::new();
    if e.knn {
        let exp = KnnExperiment {
            metrics: e.metrics.clone(),
            ks: e.ks.clone(),
            split_seeds: seeds.clone(),
            weightings: e.weightings.clone(),
            test_fraction: e.test_fraction,
            setup: cfg.setup(),
        };
        curves = knn_curve_experiment(&data, &exp)?;
        out.put("knn_curves.csv", &curves_csv(&curves, &seeds)?)?;
    }

    let mut medians = Vec::new();
    let mut stresses = Vec::new();
    if e.figures {
        let (train, _) = scaled_split(&cfg, &data)?;
        if e.reference_index >= train.len() {
            return Err(QcmlError::config(
                "evaluation.reference_index",
                format!("must be below the training size {}", train.len()),
            ));
        }
        let train_idx: Vec<usize> = (0..train.len()).collect();
        let needs_forest = e.metrics.iter().any(|m| {
            matches!(m, ProximityMetric::RfBreiman | ProximityMetric::RfOob | ProximityMetric::RfGap)
        });
        let forest = if needs_forest {
            Some(fit_forest(&cfg.forest, train.x(), train.y())?)
        } else {
            None
        };
        let qcml = if e.metrics.contains(&ProximityMetric::Qcml) {
            train_ensemble(&cfg.qcml, cfg.ensemble_size, train.x(), train.y())?
                .into_iter()
                .map(|t| t.model)
                .collect()
        } else {
            Vec::new()
        };
        let mut reports = Vec::new();
        for &metric in &e.metrics {
            let p = match metric {
                ProximityMetric::Qcml => qcml_proximity_matrix(&qcml, train.x(), train.x(), Role::Train, Role::Train)?,
                ProximityMetric::Euclidean => euclidean_proximity(train.x(), train.x(), Role::Train)?,
                rf => forest_pair(forest.as_ref().unwrap(), rf, &[], &train_idx)?.1,
            };
            let name = metric.name();
            let hist = distance_histogram(&p, e.histogram_bins)?;
            medians.push((metric, hist.median_average()));
            out.put(&format!("histogram-{name}.csv"), hist.to_csv().as_bytes())?;

            let refi = e.reference_index;
            let mut row = p.row(refi).to_vec();
            row[refi] = f64::NEG_INFINITY;
            let k = e.top_k.min(train.len() - 1);
            let neighbors = top_neighbors(&row, k)?;
            let estimate = knn_predict(&row, train.y(), k, Weighting::Unweighted)?;
            reports.push(NeighborReport {
                metric,
                reference_index: refi,
                reference_target: train.y()[refi],
                neighbor_targets: neighbors.iter().map(|&j| train.y()[j]).collect(),
                proximities: neighbors.iter().map(|&j| p.get(refi, j)).collect(),
                neighbors: neighbors.clone(),
                knn_estimate: estimate,
            });

            let d = DistanceMatrix::from_proximity(&p)?;
            let emb = mds_embed(&d, &cfg.mds)?;
            stresses.push((metric, emb.stress));
            let hl = Highlight {
                reference: refi,
                neighbors,
            };
            out.put(&format!("mds-{name}.svg"), render_scatter(&emb.coords, train.y(), Some(&hl))?.as_bytes())?;
            out.put(&format!("mds-{name}.csv"), coordinates_csv(&emb.coords, train.y()).as_bytes())?;
        }
        out.put_json("reference_neighbors.json", &reports)?;
    }

    out.put_json(
        "summary.json",
        &EvaluationSummary {
            format_version: crate::eval::RESULTS_FORMAT_VERSION,
            regression: &regression,
            knn_curves: &curves,
            median_average_distance: medians,
            mds_stress: stresses,
        },
    )?;
    out.finish(&cfg, "evaluate")
}

/// Synthetic bond CSV plus its JSON schema sidecar.
pub fn cmd_synth(seed: u64, n: usize, regime: Regime, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = synth_bonds(seed, n, regime)?;
    let stem = format!("bonds-{}-n{n}-seed{seed}", regime.name());
    let csv = out_dir.join(format!("{stem}.csv"));
    let schema = out_dir.join(format!("{stem}.schema.json"));
    ds.write_csv(&csv)?;
    write_json(&schema, ds.schema())?;
    Ok(vec![csv, schema])
}

/// MDS scatter of a square proximity file.
pub fn cmd_mds(
    proximity: &Path,
    colors: Option<&[f64]>,
    reference: Option<usize>,
    top_k: usize,
    mds: &MdsConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let p = ProximityMatrix::load(proximity)?;
    let d = DistanceMatrix::from_proximity(&p)?;
    let emb = mds_embed(&d, mds)?;
    let zeros = vec![0.0; p.rows()];
    let colors = colors.unwrap_or(&zeros);
    let hl = match reference {
        Some(r) => {
            if r >= p.rows() {
                return Err(QcmlError::usage(format!("reference {r} out of range")));
            }
            let mut row = p.row(r).to_vec();
            row[r] = f64::NEG_INFINITY;
            Some(Highlight {
                reference: r,
                neighbors: top_neighbors(&row, top_k.min(p.rows() - 1).max(1))?,
            })
        }
        None => None,
    };
    let stem = proximity
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("proximity")
        .to_string();
    let svg = out_dir.join(format!("{stem}-mds.svg"));
    let csv = out_dir.join(format!("{stem}-mds.csv"));
    let json = out_dir.join(format!("{stem}-mds.json"));
    write_file(&svg, render_scatter(&emb.coords, colors, hl.as_ref())?.as_bytes())?;
    write_file(&csv, coordinates_csv(&emb.coords, colors).as_bytes())?;
    write_json(&json, &emb)?;
    Ok(vec![svg, csv, json])
}
