//! Metric MDS by stress majorization, distance histograms and SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::write_file;
use crate::error::{QcmlError, Result};
use crate::proximity::ProximityMatrix;
use crate::seed;

/// Symmetry tolerance for input distance matrices.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MdsInit {
    /// Independent uniform draws per point, keyed by a permutation-stable hash.
    Random,
    /// Classical (Torgerson) scaling, then majorization.
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdsConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: MdsInit,
}

impl Default for MdsConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
            init: MdsInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsEmbedding {
    pub coords: Vec<[f64; 2]>,
    /// `sqrt(Σ_{i<j} (d_ij − δ_ij)² / Σ_{i<j} d_ij²)` at the final configuration.
    pub stress: f64,
    /// Stress after initialization and after each iteration.
    pub stress_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Square dense distance matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Checks symmetry within [`SYMMETRY_TOL`], a zero diagonal and non-negative finite entries.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(QcmlError::schema(format!(
                "distance matrix of order {n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(QcmlError::schema(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(QcmlError::schema(format!("invalid distance {v} at ({i}, {j})")));
                }
                if (v - values[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(QcmlError::schema(format!("asymmetric distances at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn from_points(points: &[[f64; 2]]) -> Self {
        let n = points.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = dist2(points[i], points[j]);
            }
        }
        Self { n, values }
    }

    /// `d = 1 − p`, averaged with its transpose; the diagonal is set to 0.
    pub fn from_proximity(p: &ProximityMatrix) -> Result<Self> {
        if !p.is_square() {
            return Err(QcmlError::schema("MDS needs a square proximity matrix"));
        }
        let n = p.rows();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = 1.0 - 0.5 * (p.get(i, j) + p.get(j, i));
                }
            }
        }
        Self::new(n, values)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Same matrix with rows and columns reordered: `out[a][b] = self[perm[a]][perm[b]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self { n, values }
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn raw_stress(d: &DistanceMatrix, x: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..d.n {
        for j in i + 1..d.n {
            let r = d.get(i, j) - dist2(x[i], x[j]);
            s += r * r;
        }
    }
    s
}

/// Per-point initialization keys. Each key hashes the sorted distance row,
/// so it travels with the point under any reordering; equal rows are
/// disambiguated by their order of appearance.
fn point_keys(d: &DistanceMatrix) -> Vec<u64> {
    let mut keys: Vec<u64> = (0..d.n)
        .map(|i| {
            let mut row = d.row(i).to_vec();
            row.sort_by(f64::total_cmp);
            let mut h = Sha256::new();
            for v in row {
                h.update(v.to_le_bytes());
            }
            u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
        })
        .collect();
    let mut seen = std::collections::HashMap::new();
    for k in keys.iter_mut() {
        let c = seen.entry(*k).or_insert(0u64);
        *k = seed::derive_seed(*k, *c);
        *c += 1;
    }
    keys
}

fn random_init(d: &DistanceMatrix, seed: u64) -> Vec<[f64; 2]> {
    let scale = d.values.iter().copied().fold(0.0, f64::max).max(1e-12);
    point_keys(d)
        .into_iter()
        .map(|k| {
            let mut rng = seed::stream(seed, k);
            [
                scale * rng.random_range(-0.5..0.5),
                scale * rng.random_range(-0.5..0.5),
            ]
        })
        .collect()
}

/// Torgerson scaling: top two eigenpairs of the double-centred squared distances.
fn classical_init(d: &DistanceMatrix) -> Vec<[f64; 2]> {
    let n = d.n;
    let sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let total = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut coords = vec![[0.0; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let lam = eig.eigenvalues[e].max(0.0).sqrt();
        let v = eig.eigenvectors.column(e);
        // sign fixed so the largest-magnitude component is positive
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][axis] = sign * lam * v[i];
        }
    }
    coords
}

/// Majorization (SMACOF) with unit weights.
pub fn mds_embed(d: &DistanceMatrix, config: &MdsConfig) -> Result<MdsEmbedding> {
    let n = d.n;
    if n == 0 {
        return Err(QcmlError::usage("cannot embed an empty distance matrix"));
    }
    let norm: f64 = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j).powi(2))
        .sum();
    let mut x = match config.init {
        MdsInit::Random => random_init(d, config.seed),
        MdsInit::Classical => classical_init(d),
    };
    if norm == 0.0 {
        return Ok(MdsEmbedding {
            coords: vec![[0.0; 2]; n],
            stress: 0.0,
            stress_history: vec![0.0],
            iterations: 0,
            converged: true,
        });
    }
    let mut sigma = raw_stress(d, &x);
    let mut history = vec![(sigma / norm).sqrt()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        if sigma <= 1e-30 * norm {
            converged = true;
            break;
        }
        x = guttman(d, &x);
        iterations += 1;
        let next = raw_stress(d, &x);
        if next > sigma * (1.0 + 1e-12) + 1e-300 {
            return Err(QcmlError::numeric(format!(
                "stress increased at iteration {iterations}: {sigma} -> {next}"
            )));
        }
        history.push((next / norm).sqrt());
        let rel = (sigma - next) / sigma;
        sigma = next;
        if rel < config.tol {
            converged = true;
            break;
        }
    }
    Ok(MdsEmbedding {
        coords: x,
        stress: (sigma / norm).sqrt(),
        stress_history: history,
        iterations,
        converged,
    })
}

/// `X ← (1/n) B(X) X`.
fn guttman(d: &DistanceMatrix, x: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = d.n;
    let mut out = vec![[0.0; 2]; n];
    for i in 0..n {
        let mut acc = [0.0; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let delta = dist2(x[i], x[j]);
            if delta > 0.0 {
                let r = d.get(i, j) / delta;
                acc[0] += r * (x[i][0] - x[j][0]);
                acc[1] += r * (x[i][1] - x[j][1]);
            }
        }
        out[i] = [acc[0] / n as f64, acc[1] / n as f64];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning [0, 1]; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Per-row mean distance to every other point.
    pub averages: Vec<f64>,
}

impl Histogram {
    /// `log10` of each count; `None` for empty bins.
    pub fn log_counts(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .map(|&c| (c > 0).then(|| (c as f64).log10()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count,log10_count\n");
        for (b, &c) in self.counts.iter().enumerate() {
            let log = self.log_counts()[b].map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{:.6},{:.6},{c},{log}", self.edges[b], self.edges[b + 1]);
        }
        s
    }

    pub fn median_average(&self) -> f64 {
        let mut v = self.averages.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Average distance `1 − p` from each row point to every other point, binned on [0, 1].
pub fn distance_histogram(p: &ProximityMatrix, bins: usize) -> Result<Histogram> {
    if !p.is_square() {
        return Err(QcmlError::schema("distance histogram needs a square proximity matrix"));
    }
    if bins == 0 {
        return Err(QcmlError::usage("histogram needs at least one bin"));
    }
    let n = p.rows();
    if n < 2 {
        return Err(QcmlError::DegenerateData("need at least two points".into()));
    }
    let averages: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| 1.0 - p.get(i, j))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect();
    let mut counts = vec![0; bins];
    for &a in &averages {
        let b = ((a * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        counts,
        averages,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Highlight {
    pub reference: usize,
    pub neighbors: Vec<usize>,
}

const CANVAS: f64 = 640.0;
const MARGIN: f64 = 40.0;
const LIGHT: [f64; 3] = [222.0, 235.0, 247.0];
const DARK: [f64; 3] = [8.0, 48.0, 107.0];

/// Fill for a color value scaled to `t ∈ [0, 1]`: a linear ramp from light to dark blue,
/// so higher values are darker.
pub fn ramp_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let c: Vec<u8> = (0..3)
        .map(|k| (LIGHT[k] + t * (DARK[k] - LIGHT[k])).round() as u8)
        .collect();
    format!("rgb({},{},{})", c[0], c[1], c[2])
}

/// Deterministic SVG 1.1 scatter. Base points use [`ramp_color`]; the
/// reference is drawn in red and its neighbors in black, both on top.
pub fn render_scatter(coords: &[[f64; 2]], colors: &[f64], highlight: Option<&Highlight>) -> Result<String> {
    if coords.len() != colors.len() {
        return Err(QcmlError::schema(format!(
            "{} coordinates but {} color values",
            coords.len(),
            colors.len()
        )));
    }
    let n = coords.len();
    if let Some(h) = highlight {
        if let Some(&bad) = std::iter::once(&h.reference).chain(&h.neighbors).find(|&&i| i >= n) {
            return Err(QcmlError::usage(format!("highlight index {bad} out of range ({n} points)")));
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (CANVAS - 2.0 * MARGIN) / span;
    let place = |c: [f64; 2]| {
        (
            MARGIN + (c[0] - lo[0]) * scale,
            CANVAS - MARGIN - (c[1] - lo[1]) * scale,
        )
    };
    let (cmin, cmax) = colors
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let crange = cmax - cmin;

    let mut special = vec![None; n];
    if let Some(h) = highlight {
        for &j in &h.neighbors {
            special[j] = Some("black");
        }
        special[h.reference] = Some("red");
    }

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{CANVAS}" height="{CANVAS}" viewBox="0 0 {CANVAS} {CANVAS}">"#
    );
    let _ = writeln!(s, r#"<rect width="{CANVAS}" height="{CANVAS}" fill="white"/>"#);
    for i in (0..n).filter(|&i| special[i].is_none()) {
        let (px, py) = place(coords[i]);
        let t = if crange > 0.0 { (colors[i] - cmin) / crange } else { 0.5 };
        let _ = writeln!(
            s,
            r#"<circle class="base" cx="{px:.3}" cy="{py:.3}" r="4" fill="{}" fill-opacity="0.8"/>"#,
            ramp_color(t)
        );
    }
    for pass in ["black", "red"] {
        for i in (0..n).filter(|&i| special[i] == Some(pass)) {
            let (px, py) = place(coords[i]);
            let r = if pass == "red" { 6 } else { 5 };
            let _ = writeln!(
                s,
                r#"<circle class="{}" cx="{px:.3}" cy="{py:.3}" r="{r}" fill="{pass}"/>"#,
                if pass == "red" { "reference" } else { "neighbor" }
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn coordinates_csv(coords: &[[f64; 2]], colors: &[f64]) -> String {
    let mut s = String::from("index,x,y,color\n");
    for (i, (c, v)) in coords.iter().zip(colors).enumerate() {
        let _ = writeln!(s, "{i},{},{},{v}", c[0], c[1]);
    }
    s
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proximity::{ProximityMetric, Role};

    #[test]
    fn equilateral_triangle() {
        let d = DistanceMatrix::new(3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let e = mds_embed(&d, &MdsConfig::default()).unwrap();
        assert!(e.stress < 1e-8, "stress {}", e.stress);
    }

    #[test]
    fn two_points() {
        let d = DistanceMatrix::new(2, vec![0.0, 2.5, 2.5, 0.0]).unwrap();
        let e = mds_embed(&d, &MdsConfig::default()).unwrap();
        assert!((dist2(e.coords[0], e.coords[1]) - 2.5).abs() < 1e-12);
        assert!(e.stress < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn histogram_extremes() {
        let n = 5;
        let eye: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let p = ProximityMatrix::new(n, n, eye, ProximityMetric::Euclidean, Role::Train, Role::Train).unwrap();
        let h = distance_histogram(&p, 10).unwrap();
        assert!(h.averages.iter().all(|&a| a == 1.0));
        assert_eq!(h.counts[9], 5);
        let ones = ProximityMatrix::new(n, n, vec![1.0; n * n], ProximityMetric::Qcml, Role::Train, Role::Train).unwrap();
        let h = distance_histogram(&ones, 4).unwrap();
        assert_eq!(h.counts, vec![5, 0, 0, 0]);
        assert_eq!(h.log_counts()[1], None);
        let rect = ProximityMatrix::new(1, 2, vec![0.5, 0.5], ProximityMetric::Qcml, Role::Test, Role::Train).unwrap();
        assert!(distance_histogram(&rect, 4).is_err());
    }

    #[test]
    fn scatter_counts_and_determinism() {
        let coords = vec![[0.0, 0.0], [1.0, 0.5], [0.2, 0.9]];
        let svg = render_scatter(&coords, &[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg, render_scatter(&coords, &[1.0, 2.0, 3.0], None).unwrap());
        let bad = Highlight {
            reference: 3,
            neighbors: vec![],
        };
        assert!(render_scatter(&coords, &[1.0, 2.0, 3.0], Some(&bad)).is_err());
    }

    #[test]
    fn ramp_darkens() {
        assert_eq!(ramp_color(0.0), "rgb(222,235,247)");
        assert_eq!(ramp_color(1.0), "rgb(8,48,107)");
    }
}
