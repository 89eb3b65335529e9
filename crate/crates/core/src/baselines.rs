//! Ordinary least squares and Euclidean proximity.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QcmlError, Result};
use crate::proximity::{ProximityMatrix, ProximityMetric, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let k = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != k) {
        return Err(QcmlError::schema("rows differ in width"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(QcmlError::schema("non-finite feature value"));
    }
    Ok(k)
}

/// Least-squares fit with intercept. Rank-deficient designs get the
/// minimum-norm coefficient vector.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    if x.is_empty() {
        return Err(QcmlError::usage("training set is empty"));
    }
    if x.len() != y.len() {
        return Err(QcmlError::schema("features and targets differ in length"));
    }
    let k = check_rows(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(QcmlError::schema("non-finite target value"));
    }
    let n = x.len();
    let x_mean: Vec<f64> = (0..k)
        .map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    if k == 0 {
        return Ok(LinearModel {
            coefficients: Vec::new(),
            intercept: y_mean,
        });
    }
    let a = DMatrix::from_fn(n, k, |i, c| x[i][c] - x_mean[c]);
    let b = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let svd = a.svd(true, true);
    let eps = f64::EPSILON * n.max(k) as f64 * svd.singular_values.max();
    let beta = svd
        .solve(&b, eps)
        .map_err(|e| QcmlError::numeric(format!("least squares failed: {e}")))?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(QcmlError::numeric("least squares produced non-finite coefficients"));
    }
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        coefficients,
        intercept,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Largest pairwise distance among training rows.
pub fn max_train_distance(x_train: &[Vec<f64>]) -> f64 {
    (0..x_train.len())
        .into_par_iter()
        .map(|i| {
            x_train[i + 1..]
                .iter()
                .map(|r| dist(&x_train[i], r))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// `1 − d/d_max` between query rows and training rows, clamped at 0.
pub fn euclidean_proximity(
    x_train: &[Vec<f64>],
    x_query: &[Vec<f64>],
    query_role: Role,
) -> Result<ProximityMatrix> {
    let k = check_rows(x_train)?;
    let kq = check_rows(x_query)?;
    if !x_query.is_empty() && kq != k {
        return Err(QcmlError::schema(format!(
            "query rows have {kq} features, training rows {k}"
        )));
    }
    let d_max = max_train_distance(x_train);
    if d_max == 0.0 {
        return Err(QcmlError::DegenerateData(
            "all training points coincide; Euclidean proximity undefined".into(),
        ));
    }
    let n = x_train.len();
    let mut values = vec![0.0; x_query.len() * n];
    values
        .par_chunks_mut(n)
        .zip(x_query)
        .for_each(|(out, q)| {
            for (o, t) in out.iter_mut().zip(x_train) {
                *o = (1.0 - dist(q, t) / d_max).max(0.0);
            }
        });
    ProximityMatrix::new(
        x_query.len(),
        n,
        values,
        ProximityMetric::Euclidean,
        query_role,
        Role::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| 3.0 * i as f64 + 1.0).collect();
        let m = fit_linear(&x, &y).unwrap();
        assert!((m.coefficients[0] - 3.0).abs() < 1e-10);
        assert!((m.intercept - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_target() {
        let x = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![2.0, 2.0]];
        let m = fit_linear(&x, &[4.0; 4]).unwrap();
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert!((m.intercept - 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_column_gets_least_norm_split() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 * i as f64).collect();
        let m = fit_linear(&x, &y).unwrap();
        assert!((m.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((m.coefficients[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let x = vec![vec![f64::NAN], vec![1.0]];
        assert!(matches!(fit_linear(&x, &[0.0, 1.0]), Err(QcmlError::Schema(_))));
    }

    #[test]
    fn collinear_points() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let p = euclidean_proximity(&x, &x, Role::Train).unwrap();
        assert!((p.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(p.get(0, 2), 0.0);
        assert_eq!(p.get(2, 0), 0.0);
        assert!((0..3).all(|i| p.get(i, i) == 1.0));
        assert_eq!(p.max_asymmetry(), Some(0.0));
    }

    #[test]
    fn far_query_clamps() {
        let x = vec![vec![0.0], vec![1.0]];
        let p = euclidean_proximity(&x, &[vec![5.0]], Role::Test).unwrap();
        assert_eq!(p.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn identical_train_points_are_degenerate() {
        let x = vec![vec![1.0, 1.0]; 3];
        assert!(matches!(
            euclidean_proximity(&x, &x, Role::Train),
            Err(QcmlError::DegenerateData(_))
        ));
    }
}
