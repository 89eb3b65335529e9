//! Splits, cross-validation, KNN regression under any proximity, metrics
//! and repeated-split aggregation.

use std::cmp::Ordering;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{euclidean_proximity, fit_linear};
use crate::codec::write_file;
use crate::data::{apply_scaling, fit_scaling, Dataset};
use crate::error::{QcmlError, Result};
use crate::forest::{fit_forest, ForestConfig, ProxRows};
use crate::model::{qcml_proximity_matrix, train, train_ensemble, TrainConfig};
use crate::proximity::{ProximityMatrix, ProximityMetric, Role};
use crate::seed;

pub const RESULTS_FORMAT_VERSION: u32 = 1;

/// Targets closer to zero than this make MAPE divergent.
pub const MAPE_ZERO_TOL: f64 = 1e-12;

/// Row indices of a shuffled split, each side sorted ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(QcmlError::config("test_fraction", "must lie strictly between 0 and 1"));
    }
    if n < 2 {
        return Err(QcmlError::usage("need at least two rows to split"));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Splits a dataset; the training side gets its own encoding and the test
/// side is encoded with it.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(data.len(), test_fraction, seed)?;
    let train = data.subset(&tr).refit_encoding();
    let test = data.subset(&te).reencode(train.encoding());
    if !test.unseen().is_empty() {
        warn!(
            "split seed {seed}: {} test cells hold categories unseen in train",
            test.unseen().len()
        );
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Unweighted,
    Proximity,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::Unweighted => "unweighted",
            Weighting::Proximity => "proximity",
        }
    }
}

fn neighbor_order(prox: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| prox[b].total_cmp(&prox[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest proximities, best first; ties go to the lower index.
pub fn top_neighbors(prox_row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > prox_row.len() {
        return Err(QcmlError::usage(format!(
            "k = {k} outside 1..={}",
            prox_row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..prox_row.len()).collect();
    let cmp = neighbor_order(prox_row);
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

pub fn knn_predict(prox_row: &[f64], y_train: &[f64], k: usize, weighting: Weighting) -> Result<f64> {
    if prox_row.len() != y_train.len() {
        return Err(QcmlError::schema("proximity row and targets differ in length"));
    }
    let nb = top_neighbors(prox_row, k)?;
    Ok(knn_from_neighbors(&nb, prox_row, y_train, weighting))
}

fn knn_from_neighbors(nb: &[usize], prox: &[f64], y: &[f64], weighting: Weighting) -> f64 {
    let unweighted = || nb.iter().map(|&j| y[j]).sum::<f64>() / nb.len() as f64;
    match weighting {
        Weighting::Unweighted => unweighted(),
        Weighting::Proximity => {
            let w: f64 = nb.iter().map(|&j| prox[j]).sum();
            if w == 0.0 {
                unweighted()
            } else {
                nb.iter().map(|&j| prox[j] * y[j]).sum::<f64>() / w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when some target is within [`MAPE_ZERO_TOL`] of zero.
    pub mape: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    /// Set when the targets are constant and R² is reported as 0.
    pub r2_degenerate: bool,
}

impl Metrics {
    pub fn mape_divergent(&self) -> bool {
        self.mape.is_none()
    }
}

pub fn compute_metrics(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    if predictions.len() != targets.len() {
        return Err(QcmlError::schema(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(QcmlError::usage("no targets to score"));
    }
    let n = targets.len() as f64;
    let pairs = || predictions.iter().zip(targets);
    let mape = if targets.iter().any(|y| y.abs() < MAPE_ZERO_TOL) {
        None
    } else {
        Some(pairs().map(|(p, y)| ((p - y) / y).abs()).sum::<f64>() / n)
    };
    let mae = pairs().map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let ss_res: f64 = pairs().map(|(p, y)| (p - y) * (p - y)).sum();
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    let (r2, r2_degenerate) = if ss_tot == 0.0 {
        (0.0, true)
    } else {
        (1.0 - ss_res / ss_tot, false)
    };
    Ok(Metrics {
        mape,
        mae,
        rmse: (ss_res / n).sqrt(),
        r2,
        r2_degenerate,
    })
}

/// Mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let (mean, std) = mean_std(values);
    (mean, std / (values.len() as f64).sqrt())
}

/// Mean and sample standard deviation; the deviation is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<usize>,
    /// Mean validation MSE per candidate; `None` when a fold failed.
    pub mean_mse: Vec<Option<f64>>,
    pub failures: Vec<Option<String>>,
    pub selected: usize,
}

/// K-fold selection of the Hilbert-space dimension by mean validation MSE.
pub fn cv_hilbert_dim(
    x: &[Vec<f64>],
    y: &[f64],
    candidates: &[usize],
    folds: usize,
    config: &TrainConfig,
) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(QcmlError::config("cv.candidate_dims", "must not be empty"));
    }
    if folds < 2 || folds > x.len() {
        return Err(QcmlError::config("cv.folds", format!("must lie in 2..={}", x.len())));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands.len() == 1 {
        return Ok(CvReport {
            candidates: cands.clone(),
            mean_mse: vec![None],
            failures: vec![None],
            selected: cands[0],
        });
    }
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.shuffle(&mut seed::stream(config.seed, 2));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; x.len()];
        for (pos, &i) in perm.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let results: Vec<std::result::Result<f64, String>> = cands
        .par_iter()
        .map(|&dim| {
            let mut total = 0.0;
            for fold in 0..folds {
                let (tr, va): (Vec<usize>, Vec<usize>) = (0..x.len()).partition(|&i| fold_of[i] != fold);
                let xt: Vec<Vec<f64>> = tr.iter().map(|&i| x[i].clone()).collect();
                let yt: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
                let cfg = TrainConfig {
                    hilbert_dim: dim,
                    ..config.clone()
                };
                let trained = train(&cfg, &xt, &yt)
                    .map_err(|e| format!("dim {dim}, fold {fold}: {e}"))?;
                let mut se = 0.0;
                for &i in &va {
                    let p = trained
                        .model
                        .forecast(&x[i])
                        .map_err(|e| format!("dim {dim}, fold {fold}: {e}"))?;
                    se += (p - y[i]) * (p - y[i]);
                }
                total += se / va.len() as f64;
            }
            Ok(total / folds as f64)
        })
        .collect();

    let mut selected = None;
    let mut best = f64::INFINITY;
    let mut mean_mse = Vec::new();
    let mut failures = Vec::new();
    for (&dim, r) in cands.iter().zip(&results) {
        match r {
            Ok(mse) => {
                info!("cv: dim {dim} mean validation MSE {mse}");
                if *mse < best {
                    best = *mse;
                    selected = Some(dim);
                }
                mean_mse.push(Some(*mse));
                failures.push(None);
            }
            Err(msg) => {
                warn!("cv: candidate aborted ({msg})");
                mean_mse.push(None);
                failures.push(Some(msg.clone()));
            }
        }
    }
    let selected = selected.ok_or_else(|| {
        QcmlError::numeric(format!(
            "every CV candidate failed: {}",
            failures.iter().flatten().cloned().collect::<Vec<_>>().join("; ")
        ))
    })?;
    Ok(CvReport {
        candidates: cands,
        mean_mse,
        failures,
        selected,
    })
}

/// Models compared under each proximity.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximitySetup {
    pub qcml: TrainConfig,
    pub ensemble_size: usize,
    pub forest: ForestConfig,
}

/// Test-by-train proximities for one split.
pub fn split_proximities(
    train: &Dataset,
    test: &Dataset,
    metrics: &[ProximityMetric],
    setup: &ProximitySetup,
    split_seed: u64,
) -> Result<Vec<ProximityMatrix>> {
    let scaler = fit_scaling(train)?;
    let tr = apply_scaling(&scaler, train)?;
    let te = apply_scaling(&scaler, test)?;
    let needs_forest = metrics.iter().any(|m| {
        matches!(
            m,
            ProximityMetric::RfBreiman | ProximityMetric::RfOob | ProximityMetric::RfGap
        )
    });
    let forest = if needs_forest {
        let cfg = ForestConfig {
            seed: seed::derive_seed(setup.forest.seed, split_seed),
            ..setup.forest.clone()
        };
        Some(fit_forest(&cfg, tr.x(), tr.y())?)
    } else {
        None
    };
    metrics
        .iter()
        .map(|m| match m {
            ProximityMetric::Qcml => {
                let cfg = TrainConfig {
                    seed: seed::derive_seed(setup.qcml.seed, split_seed),
                    ..setup.qcml.clone()
                };
                let models: Vec<_> = train_ensemble(&cfg, setup.ensemble_size, tr.x(), tr.y())?
                    .into_iter()
                    .map(|t| t.model)
                    .collect();
                qcml_proximity_matrix(&models, te.x(), tr.x(), Role::Test, Role::Train)
            }
            ProximityMetric::Euclidean => euclidean_proximity(tr.x(), te.x(), Role::Test),
            ProximityMetric::RfBreiman => forest.as_ref().unwrap().prox_breiman(ProxRows::Query(te.x())),
            ProximityMetric::RfOob => forest.as_ref().unwrap().prox_oob_matrix(ProxRows::Query(te.x())),
            ProximityMetric::RfGap => forest.as_ref().unwrap().prox_gap(ProxRows::Query(te.x())),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Score {
    Mape,
    Mae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnExperiment {
    pub metrics: Vec<ProximityMetric>,
    pub ks: Vec<usize>,
    /// One split per seed.
    pub split_seeds: Vec<u64>,
    pub weightings: Vec<Weighting>,
    pub test_fraction: f64,
    pub setup: ProximitySetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnCurve {
    pub metric: ProximityMetric,
    pub weighting: Weighting,
    pub score: Score,
    pub ks: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `per_split[s][k_index]`.
    pub per_split: Vec<Vec<f64>>,
}

impl KnnExperiment {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if self.split_seeds.len() < 2 {
            return Err(QcmlError::config("evaluation.n_splits", "must be at least 2"));
        }
        if self.ks.is_empty() || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QcmlError::config("evaluation.ks", "must be nonempty and strictly increasing"));
        }
        if self.ks[0] < 1 || *self.ks.last().unwrap() > n_train {
            return Err(QcmlError::config(
                "evaluation.ks",
                format!("values must lie in 1..={n_train}"),
            ));
        }
        if self.metrics.is_empty() || self.weightings.is_empty() {
            return Err(QcmlError::config("evaluation.metrics", "need at least one metric and weighting"));
        }
        Ok(())
    }
}

/// Per split: fit, build test-by-train proximities, score KNN predictions
/// at every k. MAPE is used unless some target is near zero, then MAE.
pub fn knn_curve_experiment(data: &Dataset, exp: &KnnExperiment) -> Result<Vec<KnnCurve>> {
    let n_test = ((data.len() as f64 * exp.test_fraction).round() as usize).clamp(1, data.len().saturating_sub(1).max(1));
    exp.validate(data.len() - n_test)?;
    let score = if data.y().iter().any(|y| y.abs() < MAPE_ZERO_TOL) {
        warn!("targets contain zeros; KNN curves report MAE instead of MAPE");
        Score::Mae
    } else {
        Score::Mape
    };

    // [split][metric][weighting][k]
    let per_split: Vec<Vec<Vec<Vec<f64>>>> = exp
        .split_seeds
        .par_iter()
        .map(|&s| {
            let ctx = |e: QcmlError| match e {
                QcmlError::Numeric(m) => QcmlError::Numeric(format!("split seed {s}: {m}")),
                QcmlError::Data(m) => QcmlError::Data(format!("split seed {s}: {m}")),
                other => other,
            };
            let (train, test) = split(data, exp.test_fraction, s).map_err(ctx)?;
            let prox = split_proximities(&train, &test, &exp.metrics, &exp.setup, s).map_err(ctx)?;
            Ok(prox
                .iter()
                .map(|p| {
                    exp.weightings
                        .iter()
                        .map(|&w| knn_scores(p, train.y(), test.y(), &exp.ks, w, score))
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut curves = Vec::new();
    for (mi, &metric) in exp.metrics.iter().enumerate() {
        for (wi, &weighting) in exp.weightings.iter().enumerate() {
            let rows: Vec<Vec<f64>> = per_split.iter().map(|s| s[mi][wi].clone()).collect();
            let (mean, stderr) = (0..exp.ks.len())
                .map(|ki| mean_stderr(&rows.iter().map(|r| r[ki]).collect::<Vec<_>>()))
                .unzip();
            curves.push(KnnCurve {
                metric,
                weighting,
                score,
                ks: exp.ks.clone(),
                mean,
                stderr,
                per_split: rows,
            });
        }
    }
    Ok(curves)
}

fn knn_scores(
    prox: &ProximityMatrix,
    y_train: &[f64],
    y_test: &[f64],
    ks: &[usize],
    weighting: Weighting,
    score: Score,
) -> Vec<f64> {
    let k_max = *ks.last().unwrap();
    let neighbors: Vec<Vec<usize>> = (0..prox.rows())
        .map(|r| top_neighbors(prox.row(r), k_max).expect("k validated"))
        .collect();
    ks.iter()
        .map(|&k| {
            let preds: Vec<f64> = neighbors
                .iter()
                .enumerate()
                .map(|(r, nb)| knn_from_neighbors(&nb[..k], prox.row(r), y_train, weighting))
                .collect();
            let m = compute_metrics(&preds, y_test).expect("lengths match");
            match score {
                Score::Mape => m.mape.expect("targets checked nonzero"),
                Score::Mae => m.mae,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionModel {
    Linear,
    Forest,
    Qcml,
}

impl RegressionModel {
    pub fn name(self) -> &'static str {
        match self {
            RegressionModel::Linear => "linear",
            RegressionModel::Forest => "forest",
            RegressionModel::Qcml => "qcml",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub model: RegressionModel,
    pub per_split: Vec<Metrics>,
    /// `None` if MAPE diverged on any split.
    pub mape: Option<MeanStd>,
    pub mae: MeanStd,
    pub rmse: MeanStd,
    pub r2: MeanStd,
}

fn summarize(model: RegressionModel, per_split: Vec<Metrics>) -> RegressionSummary {
    let ms = |f: &dyn Fn(&Metrics) -> f64| {
        let (mean, std) = mean_std(&per_split.iter().map(f).collect::<Vec<_>>());
        MeanStd { mean, std }
    };
    let mape = if per_split.iter().any(Metrics::mape_divergent) {
        None
    } else {
        Some(ms(&|m| m.mape.unwrap()))
    };
    RegressionSummary {
        model,
        mape,
        mae: ms(&|m| m.mae),
        rmse: ms(&|m| m.rmse),
        r2: ms(&|m| m.r2),
        per_split,
    }
}

/// Test-set regression metrics per model over repeated seeded splits.
pub fn regression_experiment(
    data: &Dataset,
    models: &[RegressionModel],
    split_seeds: &[u64],
    test_fraction: f64,
    setup: &ProximitySetup,
) -> Result<Vec<RegressionSummary>> {
    let jobs: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|m| split_seeds.iter().map(move |&s| (m, s)))
        .collect();
    let metrics: Vec<Metrics> = jobs
        .par_iter()
        .map(|&(mi, s)| {
            let (train, test) = split(data, test_fraction, s)?;
            let scaler = fit_scaling(&train)?;
            let tr = apply_scaling(&scaler, &train)?;
            let te = apply_scaling(&scaler, &test)?;
            let preds = match models[mi] {
                RegressionModel::Linear => fit_linear(tr.x(), tr.y())?.predict_batch(te.x()),
                RegressionModel::Forest => {
                    let cfg = ForestConfig {
                        seed: seed::derive_seed(setup.forest.seed, s),
                        ..setup.forest.clone()
                    };
                    fit_forest(&cfg, tr.x(), tr.y())?.predict_batch(te.x())?
                }
                RegressionModel::Qcml => {
                    let cfg = TrainConfig {
                        seed: seed::derive_seed(setup.qcml.seed, s),
                        ..setup.qcml.clone()
                    };
                    crate::model::train(&cfg, tr.x(), tr.y())?.model.forecast_batch(te.x())?
                }
            };
            compute_metrics(&preds, te.y())
        })
        .collect::<Result<_>>()?;
    Ok(models
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let rows = metrics[mi * split_seeds.len()..(mi + 1) * split_seeds.len()].to_vec();
            summarize(m, rows)
        })
        .collect())
}

/// One row per metric × weighting × k × split.
pub fn curves_csv(curves: &[KnnCurve], split_seeds: &[u64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| QcmlError::data(e.to_string());
    w.write_record(["format_version", "metric", "weighting", "score", "k", "split_seed", "value"])
        .map_err(err)?;
    for c in curves {
        for (ki, k) in c.ks.iter().enumerate() {
            for (si, s) in split_seeds.iter().enumerate() {
                w.write_record([
                    RESULTS_FORMAT_VERSION.to_string(),
                    c.metric.name().to_string(),
                    c.weighting.name().to_string(),
                    score_name(c.score).to_string(),
                    k.to_string(),
                    s.to_string(),
                    c.per_split[si][ki].to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.into_inner().map_err(|e| QcmlError::data(e.to_string()))
}

pub fn score_name(s: Score) -> &'static str {
    match s {
        Score::Mape => "mape",
        Score::Mae => "mae",
    }
}

/// One row per model × split with all four metrics.
pub fn regression_csv(rows: &[RegressionSummary], split_seeds: &[u64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| QcmlError::data(e.to_string());
    w.write_record(["format_version", "model", "split_seed", "mape", "mae", "rmse", "r2"])
        .map_err(err)?;
    for r in rows {
        for (m, s) in r.per_split.iter().zip(split_seeds) {
            w.write_record([
                RESULTS_FORMAT_VERSION.to_string(),
                r.model.name().to_string(),
                s.to_string(),
                m.mape.map_or_else(|| "divergent".to_string(), |v| v.to_string()),
                m.mae.to_string(),
                m.rmse.to_string(),
                m.r2.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| QcmlError::data(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| QcmlError::data(format!("json encoding failed: {e}")))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
