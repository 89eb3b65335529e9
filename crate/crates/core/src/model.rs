//! Supervised QCML regression.
//!
//! A data point `x ∈ R^K` is embedded as the ground state `ψ(x)` of the
//! error Hamiltonian `H(x) = ½ Σ_k (A_k − x_k I)²`. The forecast is the
//! expectation `⟨ψ|B|ψ⟩` of a target observable `B`. Training adjusts the
//! `A_k` and `B` by gradient descent, with the ground-state derivative
//! obtained from first-order eigenvector perturbation theory.

use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{QcmlError, Result};
use crate::hermitian::{
    eigh_matrix, expectation_matrix, fidelity, ground_from_decomposition, trace_gradient, CMatrix,
    HermitianOperator, QuantumState,
};
use crate::proximity::{ProximityMatrix, ProximityMetric, Role};
use crate::seed;

const MODEL_MAGIC: &[u8] = b"QCML1";

/// Per-column affine map `z = (x − offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineScaler {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Z-scores each column. Columns holding only 0/1 values are left as is
    /// (one-hot indicators), constant columns are centred with unit scale.
    pub fn fit_columns(rows: &[Vec<f64>]) -> Self {
        let k = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut offset = vec![0.0; k];
        let mut scale = vec![1.0; k];
        for c in 0..k {
            let binary = rows.iter().all(|r| r[c] == 0.0 || r[c] == 1.0);
            if binary {
                continue;
            }
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            offset[c] = mean;
            if var.sqrt() > 1e-12 {
                scale[c] = var.sqrt();
            }
        }
        Self { offset, scale }
    }

    pub fn fit_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            offset: vec![mean],
            scale: vec![if sd > 1e-12 { sd } else { 1.0 }],
        }
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) / s)
            .collect()
    }

    pub fn apply_scalar(&self, v: f64) -> f64 {
        (v - self.offset[0]) / self.scale[0]
    }

    pub fn invert_scalar(&self, z: f64) -> f64 {
        z * self.scale[0] + self.offset[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainSgd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hilbert_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub gap_guard: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hilbert_dim: 8,
            epochs: 300,
            learning_rate: 0.01,
            batch_size: 32,
            optimizer: Optimizer::AdaptiveMoment,
            loss: Loss::Mae,
            gap_guard: 1e-9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hilbert_dim < 1 {
            return Err(QcmlError::config("qcml.hilbert_dim", "must be at least 1"));
        }
        if self.epochs < 1 {
            return Err(QcmlError::config("qcml.epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QcmlError::config("qcml.learning_rate", "must be positive"));
        }
        if self.batch_size < 1 {
            return Err(QcmlError::config("qcml.batch_size", "must be at least 1"));
        }
        if !(self.gap_guard >= 0.0) {
            return Err(QcmlError::config("qcml.gap_guard", "must be non-negative"));
        }
        Ok(())
    }
}

/// Ground-state embedding of one data point.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub state: QuantumState,
    pub gap: f64,
}

/// Forecast together with its parameter gradient at one (scaled) input.
#[derive(Debug, Clone)]
pub struct ForecastGradient {
    /// Forecast in scaled target units.
    pub value: f64,
    pub gap: f64,
    /// `None` when the ground state is within the gap guard of degeneracy.
    pub feature_grads: Option<Vec<Vec<f64>>>,
    pub target_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub feature_grads: Vec<Vec<f64>>,
    pub target_grad: Vec<f64>,
    /// Samples whose feature-operator gradient was dropped at a near-degenerate ground state.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcmlModel {
    hilbert_dim: usize,
    feature_ops: Vec<HermitianOperator>,
    target_op: HermitianOperator,
    pub feature_scaler: AffineScaler,
    pub target_scaler: AffineScaler,
    pub seed: u64,
}

/// Operators materialized once so repeated evaluations skip the parameter unpacking.
struct Materialized {
    a: Vec<CMatrix>,
    a_sq: Vec<CMatrix>,
    b: CMatrix,
}

impl QcmlModel {
    pub fn new(
        feature_ops: Vec<HermitianOperator>,
        target_op: HermitianOperator,
        feature_scaler: AffineScaler,
        target_scaler: AffineScaler,
        seed: u64,
    ) -> Result<Self> {
        if feature_ops.is_empty() {
            return Err(QcmlError::schema("a model needs at least one feature operator"));
        }
        let n = target_op.dim();
        if let Some(bad) = feature_ops.iter().position(|a| a.dim() != n) {
            return Err(QcmlError::schema(format!(
                "feature operator {bad} has dimension {}, target operator {n}",
                feature_ops[bad].dim()
            )));
        }
        if feature_scaler.len() != feature_ops.len() || target_scaler.len() != 1 {
            return Err(QcmlError::schema("scaler width does not match the model"));
        }
        if feature_scaler
            .scale
            .iter()
            .chain(&target_scaler.scale)
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(QcmlError::schema("scaler standard deviations must be positive"));
        }
        Ok(Self {
            hilbert_dim: n,
            feature_ops,
            target_op,
            feature_scaler,
            target_scaler,
            seed,
        })
    }

    /// Random operators with i.i.d. `N(0, 1/N)` parameters and identity scalers.
    pub fn random(hilbert_dim: usize, n_features: usize, seed: u64) -> Result<Self> {
        if hilbert_dim == 0 || n_features == 0 {
            return Err(QcmlError::usage("hilbert_dim and n_features must be positive"));
        }
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, 1.0 / (hilbert_dim as f64).sqrt()).unwrap();
        let mut draw = || {
            let p: Vec<f64> = (0..hilbert_dim * hilbert_dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            HermitianOperator::new(p, hilbert_dim).unwrap()
        };
        let feature_ops = (0..n_features).map(|_| draw()).collect();
        let target_op = draw();
        Self::new(
            feature_ops,
            target_op,
            AffineScaler::identity(n_features),
            AffineScaler::identity(1),
            seed,
        )
    }

    pub fn hilbert_dim(&self) -> usize {
        self.hilbert_dim
    }

    pub fn n_features(&self) -> usize {
        self.feature_ops.len()
    }

    pub fn feature_ops(&self) -> &[HermitianOperator] {
        &self.feature_ops
    }

    pub fn target_op(&self) -> &HermitianOperator {
        &self.target_op
    }

    pub fn feature_ops_mut(&mut self) -> &mut [HermitianOperator] {
        &mut self.feature_ops
    }

    pub fn target_op_mut(&mut self) -> &mut HermitianOperator {
        &mut self.target_op
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(QcmlError::schema(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.len()
            )));
        }
        Ok(())
    }

    fn materialize(&self) -> Materialized {
        let a: Vec<CMatrix> = self.feature_ops.iter().map(HermitianOperator::matrix).collect();
        let a_sq = a.iter().map(|m| m.matmul(m)).collect();
        Materialized {
            a,
            a_sq,
            b: self.target_op.matrix(),
        }
    }

    /// `H(x) = ½ Σ_k (A_k − x_k I)²` for an already-scaled `x`.
    pub fn error_hamiltonian(&self, x: &[f64]) -> Result<HermitianOperator> {
        self.check_len(x)?;
        HermitianOperator::from_matrix(&hamiltonian_matrix(&self.materialize(), x))
    }

    /// Ground state of `H(x)` for an already-scaled `x`.
    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        self.check_len(x)?;
        embed_with(&self.materialize(), x)
    }

    /// Embedding of a point given in original feature units.
    pub fn embed_raw(&self, x_raw: &[f64]) -> Result<Embedding> {
        self.check_len(x_raw)?;
        self.embed(&self.feature_scaler.apply(x_raw))
    }

    /// `(⟨ψ|A_k|ψ⟩)_k`.
    pub fn position(&self, state: &QuantumState) -> Result<Vec<f64>> {
        self.feature_ops
            .iter()
            .map(|a| crate::hermitian::expectation(a, state))
            .collect()
    }

    /// Forecast in scaled target units for a scaled input.
    pub fn forecast_scaled(&self, x: &[f64]) -> Result<f64> {
        let emb = self.embed(x)?;
        crate::hermitian::expectation(&self.target_op, &emb.state)
    }

    /// Forecast in original target units for an input in original feature units.
    pub fn forecast(&self, x_raw: &[f64]) -> Result<f64> {
        self.check_len(x_raw)?;
        let z = self.forecast_scaled(&self.feature_scaler.apply(x_raw))?;
        Ok(self.target_scaler.invert_scalar(z))
    }

    pub fn forecast_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mats = self.materialize();
        rows.par_iter()
            .map(|x| {
                self.check_len(x)?;
                let emb = embed_with(&mats, &self.feature_scaler.apply(x))?;
                let z = expectation_matrix(&mats.b, &emb.state)?;
                Ok(self.target_scaler.invert_scalar(z))
            })
            .collect()
    }

    /// Forecast and its gradient with respect to every operator parameter.
    pub fn forecast_gradient(&self, x: &[f64], gap_guard: f64) -> Result<ForecastGradient> {
        self.check_len(x)?;
        forecast_gradient_with(&self.materialize(), x, gap_guard)
    }

    /// Mean loss over a scaled batch and its gradient.
    ///
    /// The subgradient of `|r|` at `r = 0` is taken as 0.
    pub fn loss_and_grads(
        &self,
        xs: &[&[f64]],
        ys: &[f64],
        loss: Loss,
        gap_guard: f64,
    ) -> Result<LossGrads> {
        if xs.is_empty() {
            return Err(QcmlError::usage("loss_and_grads needs a nonempty batch"));
        }
        if xs.len() != ys.len() {
            return Err(QcmlError::schema("batch inputs and targets differ in length"));
        }
        let mats = self.materialize();
        let n2 = self.hilbert_dim * self.hilbert_dim;
        let inv = 1.0 / xs.len() as f64;
        let mut out = LossGrads {
            loss: 0.0,
            feature_grads: vec![vec![0.0; n2]; self.n_features()],
            target_grad: vec![0.0; n2],
            skipped: 0,
        };
        for (x, &y) in xs.iter().zip(ys) {
            self.check_len(x)?;
            let fg = forecast_gradient_with(&mats, x, gap_guard)?;
            let r = fg.value - y;
            let (l, dl) = match loss {
                Loss::Mae => (r.abs(), if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 }),
                Loss::Mse => (r * r, 2.0 * r),
            };
            out.loss += l * inv;
            let w = dl * inv;
            axpy(&mut out.target_grad, w, &fg.target_grad);
            match fg.feature_grads {
                Some(grads) => {
                    for (acc, g) in out.feature_grads.iter_mut().zip(&grads) {
                        axpy(acc, w, g);
                    }
                }
                None => out.skipped += 1,
            }
        }
        Ok(out)
    }

    fn param_count(&self) -> usize {
        (self.n_features() + 1) * self.hilbert_dim * self.hilbert_dim
    }

    fn apply_update(&mut self, step: &[f64]) {
        let n2 = self.hilbert_dim * self.hilbert_dim;
        for (k, op) in self.feature_ops.iter_mut().enumerate() {
            for (p, s) in op.params_mut().iter_mut().zip(&step[k * n2..(k + 1) * n2]) {
                *p -= s;
            }
        }
        let off = self.n_features() * n2;
        for (p, s) in self.target_op.params_mut().iter_mut().zip(&step[off..]) {
            *p -= s;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.magic(MODEL_MAGIC);
        enc.u64(self.n_features() as u64);
        enc.u64(self.hilbert_dim as u64);
        enc.u64(self.seed);
        enc.f64s(&self.feature_scaler.offset);
        enc.f64s(&self.feature_scaler.scale);
        enc.f64(self.target_scaler.offset[0]);
        enc.f64(self.target_scaler.scale[0]);
        for op in self.feature_ops.iter().chain(std::iter::once(&self.target_op)) {
            enc.u64(op.dim() as u64);
            for &p in op.params() {
                enc.f64(p);
            }
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(MODEL_MAGIC)?;
        let k = dec.u64()? as usize;
        let n = dec.u64()? as usize;
        let seed = dec.u64()?;
        let feature_scaler = AffineScaler {
            offset: dec.f64s()?,
            scale: dec.f64s()?,
        };
        let target_scaler = AffineScaler {
            offset: vec![dec.f64()?],
            scale: vec![dec.f64()?],
        };
        let mut ops = Vec::with_capacity(k + 1);
        for _ in 0..=k {
            let dim = dec.u64()? as usize;
            if dim != n {
                return Err(QcmlError::Format(format!(
                    "operator dimension {dim} differs from model dimension {n}"
                )));
            }
            let params = (0..dim * dim).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
            ops.push(HermitianOperator::new(params, dim)?);
        }
        dec.finish()?;
        let target_op = ops.pop().unwrap();
        Self::new(ops, target_op, feature_scaler, target_scaler, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn axpy(acc: &mut [f64], w: f64, g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += w * b;
    }
}

fn hamiltonian_matrix(m: &Materialized, x: &[f64]) -> CMatrix {
    // (A − xI)² = A² − 2xA + x²I
    let n = m.b.dim();
    let mut h = CMatrix::zeros(n);
    let mut shift = 0.0;
    for ((a, a_sq), &xk) in m.a.iter().zip(&m.a_sq).zip(x) {
        h.add_scaled(a_sq, 0.5);
        h.add_scaled(a, -xk);
        shift += 0.5 * xk * xk;
    }
    h.add_diagonal(shift);
    for i in 0..n {
        h[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let z = (h[(i, j)] + h[(j, i)].conj()) * 0.5;
            h[(i, j)] = z;
            h[(j, i)] = z.conj();
        }
    }
    h
}

fn embed_with(m: &Materialized, x: &[f64]) -> Result<Embedding> {
    let eig = eigh_matrix(&hamiltonian_matrix(m, x))?;
    let gs = ground_from_decomposition(eig);
    Ok(Embedding {
        state: gs.state,
        gap: gs.gap,
    })
}

fn forecast_gradient_with(m: &Materialized, x: &[f64], gap_guard: f64) -> Result<ForecastGradient> {
    let eig = eigh_matrix(&hamiltonian_matrix(m, x))?;
    let n = m.b.dim();
    let psi = eig.eigenvectors[0].amplitudes();
    let b_psi = m.b.matvec(psi);
    let value: f64 = psi.iter().zip(&b_psi).map(|(a, b)| (a.conj() * b).re).sum();
    let gap = if n > 1 {
        (eig.eigenvalues[1] - eig.eigenvalues[0]).max(0.0)
    } else {
        f64::INFINITY
    };

    // dŷ/dB = |ψ⟩⟨ψ|
    let mut w_b = CMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            w_b[(i, j)] = psi[i] * psi[j].conj();
        }
    }
    let target_grad = trace_gradient(&w_b);

    let feature_grads = if gap > gap_guard && n > 1 {
        // φ = Σ_{n>0} |v_n⟩⟨v_n|B|ψ⟩ / (E₀ − E_n); dŷ = tr(dH G), G = |φ⟩⟨ψ| + |ψ⟩⟨φ|
        let e0 = eig.eigenvalues[0];
        let mut phi = vec![Complex64::new(0.0, 0.0); n];
        for (e, v) in eig.eigenvalues.iter().zip(&eig.eigenvectors).skip(1) {
            let va = v.amplitudes();
            let coef: Complex64 =
                va.iter().zip(&b_psi).map(|(a, b)| a.conj() * b).sum::<Complex64>() / (e0 - e);
            for (p, a) in phi.iter_mut().zip(va) {
                *p += a * coef;
            }
        }
        let mut g = CMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] = phi[i] * psi[j].conj() + psi[i] * phi[j].conj();
            }
        }
        // dH = ½(dA C + C dA) with C = A − xI, so dŷ = tr(dA · ½(CG + GC))
        let grads = m
            .a
            .iter()
            .zip(x)
            .map(|(a, &xk)| {
                let p = a.matmul(&g);
                let mut w = p.adjoint();
                w.add_scaled(&p, 1.0);
                w.scale(0.5);
                w.add_scaled(&g, -xk);
                trace_gradient(&w)
            })
            .collect();
        Some(grads)
    } else {
        None
    };

    Ok(ForecastGradient {
        value,
        gap,
        feature_grads,
        target_grad,
    })
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: QcmlModel,
    /// Mean training loss (scaled target units) per epoch.
    pub loss_trace: Vec<f64>,
    /// Number of sample gradients dropped at near-degenerate ground states.
    pub skipped_gradients: usize,
}

/// Mini-batch gradient descent from a random initialization.
///
/// `x` holds encoded rows in original units; the model fits its own
/// feature and target scalers on them.
pub fn train(config: &TrainConfig, x: &[Vec<f64>], y: &[f64]) -> Result<TrainedModel> {
    config.validate()?;
    if x.is_empty() {
        return Err(QcmlError::usage("training set is empty"));
    }
    if x.len() != y.len() {
        return Err(QcmlError::schema("features and targets differ in length"));
    }
    let k = x[0].len();
    if k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(QcmlError::schema("training rows must share a nonzero width"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(QcmlError::schema("training data contains non-finite values"));
    }

    let mut model = QcmlModel::random(config.hilbert_dim, k, seed::derive_seed(config.seed, 0))?;
    model.seed = config.seed;
    model.feature_scaler = AffineScaler::fit_columns(x);
    model.target_scaler = AffineScaler::fit_values(y);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| model.feature_scaler.apply(r)).collect();
    let ys: Vec<f64> = y.iter().map(|&v| model.target_scaler.apply_scalar(v)).collect();

    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut shuffle_rng = seed::stream(config.seed, 1);
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, model.param_count());
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut skipped = 0;
    let n2 = config.hilbert_dim * config.hilbert_dim;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let lg = model.loss_and_grads(&bx, &by, config.loss, config.gap_guard)?;
            if !lg.loss.is_finite() {
                return Err(QcmlError::numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {bi}"
                )));
            }
            skipped += lg.skipped;
            epoch_loss += lg.loss * chunk.len() as f64;
            let mut flat = Vec::with_capacity(model.param_count());
            for g in &lg.feature_grads {
                flat.extend_from_slice(g);
            }
            flat.extend_from_slice(&lg.target_grad);
            debug_assert_eq!(flat.len(), (k + 1) * n2);
            let step = opt.step(&flat);
            model.apply_update(&step);
        }
        loss_trace.push(epoch_loss / xs.len() as f64);
    }
    Ok(TrainedModel {
        model,
        loss_trace,
        skipped_gradients: skipped,
    })
}

/// Trains `size` models that differ only in their initialization seed.
pub fn train_ensemble(
    config: &TrainConfig,
    size: usize,
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<Vec<TrainedModel>> {
    if size == 0 {
        return Err(QcmlError::usage("ensemble size must be at least 1"));
    }
    (0..size)
        .into_par_iter()
        .map(|m| {
            let cfg = TrainConfig {
                seed: seed::derive_seed(config.seed, 1000 + m as u64),
                ..config.clone()
            };
            train(&cfg, x, y)
        })
        .collect()
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        match self.kind {
            Optimizer::PlainSgd => grad.iter().map(|g| self.lr * g).collect(),
            Optimizer::AdaptiveMoment => {
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                grad.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                        *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                        self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
                    })
                    .collect()
            }
        }
    }
}

/// QCML distance `1 − |⟨ψ₁|ψ₂⟩|²`.
pub fn qcml_distance(s1: &QuantumState, s2: &QuantumState) -> Result<f64> {
    Ok((1.0 - fidelity(s1, s2)?).max(0.0))
}

/// Ensemble-averaged overlap moduli `|⟨ψ_i|ψ_j⟩|` between two point sets
/// given in original feature units.
pub fn qcml_proximity_matrix(
    models: &[QcmlModel],
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    row_role: Role,
    col_role: Role,
) -> Result<ProximityMatrix> {
    let first = models
        .first()
        .ok_or_else(|| QcmlError::usage("proximity ensemble needs at least one model"))?;
    if let Some(bad) = models.iter().position(|m| m.n_features() != first.n_features()) {
        return Err(QcmlError::schema(format!(
            "ensemble member {bad} has {} features, expected {}",
            models[bad].n_features(),
            first.n_features()
        )));
    }
    let embed_all = |m: &QcmlModel, pts: &[Vec<f64>]| -> Result<Vec<QuantumState>> {
        let mats = m.materialize();
        pts.par_iter()
            .map(|x| {
                m.check_len(x)?;
                Ok(embed_with(&mats, &m.feature_scaler.apply(x))?.state)
            })
            .collect()
    };
    let mut values = vec![0.0; rows.len() * cols.len()];
    let inv = 1.0 / models.len() as f64;
    for m in models {
        let rs = embed_all(m, rows)?;
        let cs = embed_all(m, cols)?;
        values
            .par_chunks_mut(cols.len().max(1))
            .zip(rs.par_iter())
            .try_for_each(|(out, r)| -> Result<()> {
                for (o, c) in out.iter_mut().zip(&cs) {
                    *o += r.inner(c)?.norm().min(1.0) * inv;
                }
                Ok(())
            })?;
    }
    ProximityMatrix::new(
        rows.len(),
        cols.len(),
        values,
        ProximityMetric::Qcml,
        row_role,
        col_role,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_feature_model(b: &[f64]) -> QcmlModel {
        QcmlModel::new(
            vec![HermitianOperator::diagonal(&[0.0, 1.0])],
            HermitianOperator::diagonal(b),
            AffineScaler::identity(1),
            AffineScaler::identity(1),
            0,
        )
        .unwrap()
    }

    /// Term-by-term `½ Σ (A − xI)(A − xI)` with explicit products.
    fn naive_hamiltonian(model: &QcmlModel, x: &[f64]) -> CMatrix {
        let n = model.hilbert_dim();
        let mut h = CMatrix::zeros(n);
        for (a, &xk) in model.feature_ops().iter().zip(x) {
            let mut c = a.matrix();
            c.add_diagonal(-xk);
            h.add_scaled(&c.matmul(&c), 0.5);
        }
        h
    }

    #[test]
    fn zero_model_zero_hamiltonian() {
        let m = QcmlModel::new(
            vec![HermitianOperator::zeros(3); 2],
            HermitianOperator::zeros(3),
            AffineScaler::identity(2),
            AffineScaler::identity(1),
            0,
        )
        .unwrap();
        let h = m.error_hamiltonian(&[0.0, 0.0]).unwrap();
        assert!(h.params().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn worked_one_feature_example() {
        let m = one_feature_model(&[10.0, 20.0]);
        let h = m.error_hamiltonian(&[0.9]).unwrap();
        let expect = [0.5 * 0.81, 0.5 * 0.01];
        for (got, want) in h.params()[..2].iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        let emb = m.embed(&[0.9]).unwrap();
        assert_eq!(emb.state, QuantumState::basis(2, 1));
        assert!((m.forecast(&[0.9]).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_matches_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = QcmlModel::random(5, 3, 17).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = m.error_hamiltonian(&x).unwrap().matrix();
        assert!(h.max_abs_diff(&naive_hamiltonian(&m, &x)) < 1e-12);
    }

    #[test]
    fn wrong_feature_count_is_schema_error() {
        let m = QcmlModel::random(3, 2, 0).unwrap();
        assert!(matches!(m.error_hamiltonian(&[1.0]), Err(QcmlError::Schema(_))));
        assert!(matches!(m.forecast(&[1.0, 2.0, 3.0]), Err(QcmlError::Schema(_))));
    }

    #[test]
    fn all_zero_operators_degenerate_embedding() {
        let m = QcmlModel::new(
            vec![HermitianOperator::zeros(3)],
            HermitianOperator::zeros(3),
            AffineScaler::identity(1),
            AffineScaler::identity(1),
            0,
        )
        .unwrap();
        let a = m.embed(&[0.7]).unwrap();
        let b = m.embed(&[0.7]).unwrap();
        assert!(a.gap <= crate::hermitian::DEGENERACY_TOL);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn position_cases() {
        let m = QcmlModel::new(
            vec![
                HermitianOperator::diagonal(&[1.0, 2.0, 3.0]),
                HermitianOperator::diagonal(&[-1.0, 0.0, 5.0]),
            ],
            HermitianOperator::zeros(3),
            AffineScaler::identity(2),
            AffineScaler::identity(1),
            0,
        )
        .unwrap();
        assert_eq!(m.position(&QuantumState::basis(3, 2)).unwrap(), vec![3.0, 5.0]);

        let one = one_feature_model(&[0.0, 0.0]);
        let plus = QuantumState::new(vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        assert!((one.position(&plus).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_target_operator() {
        let mut m = QcmlModel::random(4, 2, 3).unwrap();
        *m.target_op_mut() = HermitianOperator::diagonal(&[1.5; 4]);
        m.target_scaler = AffineScaler {
            offset: vec![10.0],
            scale: vec![2.0],
        };
        for x in [[0.0, 0.0], [3.0, -1.0], [-2.0, 7.0]] {
            assert!((m.forecast(&x).unwrap() - 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forecast_is_scaled_expectation() {
        let mut m = QcmlModel::random(4, 2, 8).unwrap();
        m.feature_scaler = AffineScaler {
            offset: vec![1.0, -2.0],
            scale: vec![0.5, 3.0],
        };
        m.target_scaler = AffineScaler {
            offset: vec![100.0],
            scale: vec![7.0],
        };
        let x = [0.3, 4.0];
        let emb = m.embed_raw(&x).unwrap();
        let e = crate::hermitian::expectation(m.target_op(), &emb.state).unwrap();
        assert!((m.forecast(&x).unwrap() - (e * 7.0 + 100.0)).abs() < 1e-12);
    }

    #[test]
    fn mae_b_gradient_vanishes_at_exact_fit() {
        let m = QcmlModel::random(3, 2, 5).unwrap();
        let x = [0.2, -0.4];
        let y = m.forecast_scaled(&x).unwrap();
        let lg = m.loss_and_grads(&[&x], &[y], Loss::Mae, 1e-9).unwrap();
        assert!(lg.target_grad.iter().all(|&g| g == 0.0));
        assert_eq!(lg.loss, 0.0);
    }

    #[test]
    fn duplicate_batch_equals_single_sample() {
        let m = QcmlModel::random(3, 2, 6).unwrap();
        let x = [0.5, 1.5];
        let one = m.loss_and_grads(&[&x], &[0.25], Loss::Mae, 1e-9).unwrap();
        let two = m.loss_and_grads(&[&x, &x], &[0.25, 0.25], Loss::Mae, 1e-9).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-15);
        for (a, b) in one.feature_grads.iter().flatten().zip(two.feature_grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let m = QcmlModel::random(3, 2, 6).unwrap();
        assert!(matches!(
            m.loss_and_grads(&[], &[], Loss::Mae, 1e-9),
            Err(QcmlError::Usage(_))
        ));
    }

    fn fd_forecast(m: &QcmlModel, x: &[f64], op: Option<usize>, p: usize, h: f64) -> f64 {
        let bump = |delta: f64| {
            let mut mm = m.clone();
            match op {
                Some(k) => mm.feature_ops_mut()[k].params_mut()[p] += delta,
                None => mm.target_op_mut().params_mut()[p] += delta,
            }
            // independent evaluation path: naive products, full eigh, expectation
            let h = HermitianOperator::from_matrix(&naive_hamiltonian(&mm, x)).unwrap();
            let gs = crate::hermitian::ground_state(&h).unwrap();
            crate::hermitian::expectation(mm.target_op(), &gs.state).unwrap()
        };
        (bump(h) - bump(-h)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences_small_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = QcmlModel::random(3, 2, 42).unwrap();
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fg = m.forecast_gradient(&x, 1e-9).unwrap();
        assert!(fg.gap > 1e-6);
        let grads = fg.feature_grads.unwrap();
        for k in 0..2 {
            for p in 0..9 {
                let fd = fd_forecast(&m, &x, Some(k), p, 1e-5);
                let g = grads[k][p];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "A_{k} param {p}: analytic {g} fd {fd}");
            }
        }
        for p in 0..9 {
            let fd = fd_forecast(&m, &x, None, p, 1e-5);
            let g = fg.target_grad[p];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "B param {p}: analytic {g} fd {fd}");
        }
    }

    #[test]
    fn degenerate_sample_skips_feature_gradient() {
        let m = QcmlModel::new(
            vec![HermitianOperator::zeros(2)],
            HermitianOperator::diagonal(&[1.0, 2.0]),
            AffineScaler::identity(1),
            AffineScaler::identity(1),
            0,
        )
        .unwrap();
        let lg = m.loss_and_grads(&[&[0.3]], &[0.0], Loss::Mae, 1e-9).unwrap();
        assert_eq!(lg.skipped, 1);
        assert!(lg.feature_grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = QcmlModel::random(4, 3, 12).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..5], b"QCML1");
        assert_eq!(QcmlModel::from_bytes(&bytes).unwrap(), m);
        assert!(QcmlModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn qcml_distance_cases() {
        let e1 = QuantumState::basis(2, 0);
        let e2 = QuantumState::basis(2, 1);
        let plus = QuantumState::new(vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        assert!(qcml_distance(&e1, &e1).unwrap().abs() < 1e-15);
        assert_eq!(qcml_distance(&e1, &e2).unwrap(), 1.0);
        assert!((qcml_distance(&e1, &plus).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn proximity_single_point_and_orthogonal() {
        let m = one_feature_model(&[0.0, 0.0]);
        let p = qcml_proximity_matrix(
            std::slice::from_ref(&m),
            &[vec![0.9]],
            &[vec![0.9]],
            Role::Train,
            Role::Train,
        )
        .unwrap();
        assert_eq!(p.values(), &[1.0]);
        // x = 0.9 embeds to e_2, x = 0.1 to e_1
        let q = qcml_proximity_matrix(
            std::slice::from_ref(&m),
            &[vec![0.9], vec![0.1]],
            &[vec![0.9], vec![0.1]],
            Role::Train,
            Role::Train,
        )
        .unwrap();
        assert_eq!(q.get(0, 1), 0.0);
        assert_eq!(q.get(1, 0), 0.0);
    }

    #[test]
    fn ensemble_proximity_is_mean_of_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let models: Vec<QcmlModel> = (0..3).map(|s| QcmlModel::random(4, 3, s).unwrap()).collect();
        let ens = qcml_proximity_matrix(&models, &pts, &pts, Role::Train, Role::Train).unwrap();
        let singles: Vec<ProximityMatrix> = models
            .iter()
            .map(|m| {
                qcml_proximity_matrix(std::slice::from_ref(m), &pts, &pts, Role::Train, Role::Train)
                    .unwrap()
            })
            .collect();
        for i in 0..25 {
            let mean = singles.iter().map(|s| s.values()[i]).sum::<f64>() / 3.0;
            assert!((ens.values()[i] - mean).abs() < 1e-12);
        }
        assert!(ens.max_asymmetry().unwrap() < 1e-10);
        for i in 0..5 {
            assert!((ens.get(i, i) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_features() {
        let models = vec![QcmlModel::random(3, 2, 0).unwrap(), QcmlModel::random(3, 3, 0).unwrap()];
        assert!(matches!(
            qcml_proximity_matrix(&models, &[vec![0.0, 0.0]], &[vec![0.0, 0.0]], Role::Train, Role::Train),
            Err(QcmlError::Schema(_))
        ));
    }

    #[test]
    fn permuting_features_and_operators_is_invariant() {
        let m = QcmlModel::random(4, 3, 31).unwrap();
        let perm = [2usize, 0, 1];
        let ops: Vec<HermitianOperator> = perm.iter().map(|&i| m.feature_ops()[i].clone()).collect();
        let pm = QcmlModel::new(
            ops,
            m.target_op().clone(),
            AffineScaler::identity(3),
            AffineScaler::identity(1),
            0,
        )
        .unwrap();
        let x = [0.4, -1.2, 0.8];
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        assert!((m.forecast(&x).unwrap() - pm.forecast(&px).unwrap()).abs() < 1e-12);
        let f = fidelity(&m.embed(&x).unwrap().state, &pm.embed(&px).unwrap().state).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_rejects_empty_and_bad_config() {
        let cfg = TrainConfig::default();
        assert!(train(&cfg, &[], &[]).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&bad, &[vec![1.0]], &[1.0]),
            Err(QcmlError::Config { .. })
        ));
    }
}
