//! Complex linear algebra for small dense Hermitian operators.
//!
//! Operators are stored through a real parametrization of `N²` numbers:
//! the `N` real diagonal entries, then the real parts of the strict upper
//! triangle (row-major), then the imaginary parts in the same order. Any
//! parameter vector materializes to an exactly self-adjoint matrix, so
//! gradient steps in parameter space never leave the Hermitian manifold.

use num_complex::Complex64;

use crate::error::{QcmlError, Result};

/// Gap at or below which a ground state is reported as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major complex square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![Complex64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(d, 0.0);
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_rows(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(QcmlError::schema(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn matmul(&self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.dim, rhs.dim, "matmul dimension mismatch");
        let n = self.dim;
        let mut out = CMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.dim, v.len(), "matvec dimension mismatch");
        let n = self.dim;
        (0..n)
            .map(|i| {
                self.data[i * n..(i + 1) * n]
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn adjoint(&self) -> CMatrix {
        let n = self.dim;
        let mut out = CMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        out
    }

    pub fn add_scaled(&mut self, rhs: &CMatrix, scale: f64) {
        assert_eq!(self.dim, rhs.dim);
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b * scale;
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i].re += value;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.max_abs_diff(&self.adjoint()) <= tol
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Number of strictly-upper-triangular entries of an `n × n` matrix.
pub fn upper_count(n: usize) -> usize {
    n * (n - 1) / 2
}

/// A self-adjoint `N × N` operator held by its `N²` real parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    dim: usize,
    params: Vec<f64>,
}

impl HermitianOperator {
    pub fn new(params: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(QcmlError::schema("operator dimension must be at least 1"));
        }
        if params.len() != dim * dim {
            return Err(QcmlError::schema(format!(
                "operator of dimension {dim} needs {} parameters, got {}",
                dim * dim,
                params.len()
            )));
        }
        Ok(Self { dim, params })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            params: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut op = Self::zeros(dim);
        op.params[..dim].fill(1.0);
        op
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut op = Self::zeros(diag.len());
        op.params[..diag.len()].copy_from_slice(diag);
        op
    }

    /// Recovers the parameters of a Hermitian matrix. Fails when the input
    /// deviates from self-adjointness by more than `1e-12` in any entry.
    pub fn from_matrix(m: &CMatrix) -> Result<Self> {
        if !m.is_hermitian(1e-12) {
            return Err(QcmlError::schema("matrix is not Hermitian"));
        }
        let n = m.dim();
        let u = upper_count(n);
        let mut params = vec![0.0; n * n];
        let mut idx = 0;
        for i in 0..n {
            params[i] = m[(i, i)].re;
            for j in (i + 1)..n {
                params[n + idx] = m[(i, j)].re;
                params[n + u + idx] = m[(i, j)].im;
                idx += 1;
            }
        }
        Ok(Self { dim: n, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn matrix(&self) -> CMatrix {
        let n = self.dim;
        let u = upper_count(n);
        let mut m = CMatrix::zeros(n);
        let mut idx = 0;
        for i in 0..n {
            m[(i, i)] = Complex64::new(self.params[i], 0.0);
            for j in (i + 1)..n {
                let z = Complex64::new(self.params[n + idx], self.params[n + u + idx]);
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
                idx += 1;
            }
        }
        m
    }
}

/// Projects a (not necessarily Hermitian) matrix `W` onto parameter space
/// so that `d tr(dM · W) / d params` is returned, where `dM` ranges over
/// the Hermitian basis matrices of the parametrization.
pub fn trace_gradient(w: &CMatrix) -> Vec<f64> {
    let n = w.dim();
    let u = upper_count(n);
    let mut g = vec![0.0; n * n];
    let mut idx = 0;
    for i in 0..n {
        g[i] = w[(i, i)].re;
        for j in (i + 1)..n {
            // basis for the real part: e_ij + e_ji; imaginary part: i e_ij - i e_ji
            let a = w[(j, i)];
            let b = w[(i, j)];
            g[n + idx] = (a + b).re;
            g[n + u + idx] = (Complex64::i() * (a - b)).re;
            idx += 1;
        }
    }
    g
}

/// Unit-norm state vector with a fixed phase representative.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    amplitudes: Vec<Complex64>,
}

impl QuantumState {
    /// Normalizes `amplitudes` and rotates the global phase so the first
    /// component of largest modulus is real and non-negative.
    pub fn new(amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(QcmlError::schema("state must have at least one amplitude"));
        }
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(QcmlError::numeric("state has zero or non-finite norm"));
        }
        let mut pivot = 0;
        let mut best = -1.0;
        for (i, z) in amplitudes.iter().enumerate() {
            let m = z.norm();
            if m > best {
                best = m;
                pivot = i;
            }
        }
        let phase = amplitudes[pivot] / amplitudes[pivot].norm();
        let factor = phase.conj() / norm;
        let mut amplitudes: Vec<Complex64> = amplitudes.into_iter().map(|z| z * factor).collect();
        amplitudes[pivot] = Complex64::new(amplitudes[pivot].norm(), 0.0);
        Ok(Self { amplitudes })
    }

    /// The `i`-th standard basis vector of a `dim`-dimensional space.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[i] = Complex64::new(1.0, 0.0);
        Self { amplitudes }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &QuantumState) -> Result<Complex64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(QcmlError::schema(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Full spectral decomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<QuantumState>,
}

impl EigenDecomposition {
    /// `Σ λ_i |v_i⟩⟨v_i|`.
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.eigenvalues.len();
        let mut m = CMatrix::zeros(n);
        for (lambda, v) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            let a = v.amplitudes();
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += a[i] * a[j].conj() * *lambda;
                }
            }
        }
        m
    }
}

/// Eigendecomposition of a Hermitian operator.
pub fn eigh(op: &HermitianOperator) -> Result<EigenDecomposition> {
    eigh_matrix(&op.matrix())
}

/// Cyclic complex Jacobi eigensolver for a Hermitian matrix.
///
/// Each rotation first removes the phase of the pivot `a_pq` and then
/// applies a real Givens rotation that zeroes it. Sweeps run in a fixed
/// order, so identical input bits give identical output bits.
pub fn eigh_matrix(m: &CMatrix) -> Result<EigenDecomposition> {
    let n = m.dim();
    if n == 0 {
        return Err(QcmlError::schema("cannot decompose an empty matrix"));
    }
    if m.as_slice().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(QcmlError::numeric("matrix contains non-finite entries"));
    }
    let mut a = m.clone();
    // enforce exact symmetry of the working copy
    for i in 0..n {
        a[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let z = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = z;
            a[(j, i)] = z.conj();
        }
    }
    let mut v = CMatrix::identity(n);
    let scale = a.frobenius_norm();
    let threshold = if scale > 0.0 { 1e-15 * scale } else { 0.0 };

    let mut converged = n == 1;
    let mut last_off = 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        last_off = off;
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged {
        if off_diagonal_norm(&a) <= threshold {
            converged = true;
        }
    }
    if !converged {
        return Err(QcmlError::numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps \
             (dim {n}, off-diagonal norm {last_off:e}, matrix norm {scale:e})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re).then(i.cmp(&j)));
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Vec::with_capacity(n);
    for &col in &order {
        eigenvalues.push(a[(col, col)].re);
        let amps: Vec<Complex64> = (0..n).map(|r| v[(r, col)]).collect();
        eigenvectors.push(QuantumState::new(amps)?);
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &CMatrix) -> f64 {
    let n = a.dim();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += a[(i, j)].norm_sqr();
        }
    }
    (2.0 * s).sqrt()
}

fn rotate(a: &mut CMatrix, v: &mut CMatrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    let r = apq.norm();
    if r == 0.0 {
        return;
    }
    let app = a[(p, p)].re;
    let aqq = a[(q, q)].re;
    // after the phase change e^{-iφ} on column q the pivot is the real r
    let phase = apq / r;
    let theta = (aqq - app) / (2.0 * r);
    let t = if theta >= 0.0 {
        1.0 / (theta + (theta * theta + 1.0).sqrt())
    } else {
        -1.0 / (-theta + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let e = phase.conj();
    // V = [[c, s], [-s e, c e]] acting on (p, q)
    let vqp = -e * s;
    let vqq = e * c;
    let n = a.dim();

    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = akp * c + akq * vqp;
        a[(k, q)] = akp * s + akq * vqq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = apk * c + aqk * vqp.conj();
        a[(q, k)] = apk * s + aqk * vqq.conj();
    }
    a[(p, q)] = Complex64::new(0.0, 0.0);
    a[(q, p)] = Complex64::new(0.0, 0.0);
    a[(p, p)].im = 0.0;
    a[(q, q)].im = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = vkp * c + vkq * vqp;
        v[(k, q)] = vkp * s + vkq * vqq;
    }
}

/// Lowest eigenpair of a Hermitian operator together with its spectral gap.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub state: QuantumState,
    /// `λ₁ − λ₀`; infinite for one-dimensional operators.
    pub gap: f64,
}

impl GroundState {
    pub fn is_degenerate(&self) -> bool {
        self.gap <= DEGENERACY_TOL
    }
}

pub fn ground_state(op: &HermitianOperator) -> Result<GroundState> {
    let eig = eigh(op)?;
    Ok(ground_from_decomposition(eig))
}

pub(crate) fn ground_from_decomposition(eig: EigenDecomposition) -> GroundState {
    let gap = if eig.eigenvalues.len() > 1 {
        (eig.eigenvalues[1] - eig.eigenvalues[0]).max(0.0)
    } else {
        f64::INFINITY
    };
    GroundState {
        energy: eig.eigenvalues[0],
        state: eig.eigenvectors.into_iter().next().unwrap(),
        gap,
    }
}

/// `⟨ψ|M|ψ⟩` for a Hermitian `M`.
pub fn expectation(op: &HermitianOperator, state: &QuantumState) -> Result<f64> {
    expectation_matrix(&op.matrix(), state)
}

pub fn expectation_matrix(m: &CMatrix, state: &QuantumState) -> Result<f64> {
    check_dims(m.dim(), state.dim())?;
    let mv = m.matvec(state.amplitudes());
    let z: Complex64 = state
        .amplitudes()
        .iter()
        .zip(&mv)
        .map(|(a, b)| a.conj() * b)
        .sum();
    let tol = 1e-12 * (1.0 + m.frobenius_norm());
    if z.im.abs() > tol {
        return Err(QcmlError::numeric(format!(
            "expectation has imaginary residue {:e}; operator is not Hermitian",
            z.im
        )));
    }
    Ok(z.re)
}

/// Quantum fidelity `|⟨ψ₁|ψ₂⟩|²`.
pub fn fidelity(s1: &QuantumState, s2: &QuantumState) -> Result<f64> {
    Ok(s1.inner(s2)?.norm_sqr().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_op(rng: &mut ChaCha8Rng, n: usize) -> HermitianOperator {
        let p = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        HermitianOperator::new(p, n).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> QuantumState {
        let a = (0..n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        QuantumState::new(a).unwrap()
    }

    #[test]
    fn zero_params_give_zero_matrix() {
        let op = HermitianOperator::new(vec![0.0; 9], 3).unwrap();
        assert_eq!(op.matrix(), CMatrix::zeros(3));
    }

    #[test]
    fn scalar_operator() {
        let op = HermitianOperator::new(vec![2.5], 1).unwrap();
        assert_eq!(op.matrix()[(0, 0)], c(2.5, 0.0));
    }

    #[test]
    fn wrong_param_length_is_schema_error() {
        assert!(matches!(
            HermitianOperator::new(vec![0.0; 5], 2),
            Err(QcmlError::Schema(_))
        ));
    }

    #[test]
    fn parametrization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = random_op(&mut rng, 4);
        let m = op.matrix();
        assert_eq!(m.max_abs_diff(&m.adjoint()), 0.0);
        let back = HermitianOperator::from_matrix(&m).unwrap();
        assert_eq!(back.params(), op.params());
    }

    #[test]
    fn trace_gradient_matches_basis_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let amps: Vec<Complex64> = (0..n * n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let w = CMatrix::from_rows(n, amps).unwrap();
        let g = trace_gradient(&w);
        for p in 0..n * n {
            let mut e = vec![0.0; n * n];
            e[p] = 1.0;
            let basis = HermitianOperator::new(e, n).unwrap().matrix();
            let t = basis.matmul(&w).trace();
            assert!((t.re - g[p]).abs() < 1e-14, "param {p}");
        }
    }

    #[test]
    fn diagonal_spectrum() {
        let op = HermitianOperator::diagonal(&[3.0, 1.0, 2.0]);
        let eig = eigh(&op).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 2.0, 3.0]);
        assert_eq!(eig.eigenvectors[0], QuantumState::basis(3, 1));
        assert_eq!(eig.eigenvectors[1], QuantumState::basis(3, 2));
        assert_eq!(eig.eigenvectors[2], QuantumState::basis(3, 0));
    }

    #[test]
    fn pauli_x_spectrum() {
        let m = CMatrix::from_rows(2, vec![c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]).unwrap();
        let eig = eigh(&HermitianOperator::from_matrix(&m).unwrap()).unwrap();
        assert!((eig.eigenvalues[0] + 1.0).abs() < 1e-15);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pauli_y_spectrum() {
        let m = CMatrix::from_rows(2, vec![c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)]).unwrap();
        let eig = eigh(&HermitianOperator::from_matrix(&m).unwrap()).unwrap();
        assert!((eig.eigenvalues[0] + 1.0).abs() < 1e-15);
        let v = eig.eigenvectors[0].amplitudes();
        // (1, -i)/√2 up to phase
        assert!((v[1] - c(0.0, -1.0) * v[0]).norm() < 1e-14);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let op = random_op(&mut rng, 8);
        let eig = eigh(&op).unwrap();
        let m = op.matrix();
        let r = eig.reconstruct();
        let mut diff = r.clone();
        diff.add_scaled(&m, -1.0);
        assert!(diff.frobenius_norm() < 1e-10);
        for w in eig.eigenvalues.windows(2) {
            assert!(w[0] <= w[1]);
        }
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let z = eig.eigenvectors[i].inner(&eig.eigenvectors[j]).unwrap();
                    assert!(z.norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigh_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = random_op(&mut rng, 6);
        let a = eigh(&op).unwrap();
        let b = eigh(&op.clone()).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors, b.eigenvectors);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let op = HermitianOperator::diagonal(&[1.0, f64::NAN]);
        assert!(matches!(eigh(&op), Err(QcmlError::Numeric(_))));
    }

    #[test]
    fn ground_state_of_diagonal() {
        let gs = ground_state(&HermitianOperator::diagonal(&[5.0, -2.0, 7.0])).unwrap();
        assert_eq!(gs.energy, -2.0);
        assert_eq!(gs.state, QuantumState::basis(3, 1));
        assert_eq!(gs.gap, 7.0);
        assert!(!gs.is_degenerate());
    }

    #[test]
    fn ground_state_of_identity_is_flagged() {
        let gs = ground_state(&HermitianOperator::identity(3)).unwrap();
        assert_eq!(gs.energy, 1.0);
        assert_eq!(gs.gap, 0.0);
        assert!(gs.is_degenerate());
        assert_eq!(gs.state, QuantumState::basis(3, 0));
    }

    #[test]
    fn ground_state_of_one_feature_hamiltonian() {
        // ½ (diag(0,1) - 0.9 I)² = ½ diag(0.81, 0.01)
        let h = HermitianOperator::diagonal(&[0.5 * 0.81, 0.5 * 0.01]);
        let gs = ground_state(&h).unwrap();
        assert_eq!(gs.state, QuantumState::basis(2, 1));
        assert!((gs.energy - 0.005).abs() < 1e-15);
    }

    #[test]
    fn expectation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, 4);
        assert!((expectation(&HermitianOperator::identity(4), &s).unwrap() - 1.0).abs() < 1e-14);
        let d = HermitianOperator::diagonal(&[2.0, -3.0]);
        assert_eq!(expectation(&d, &QuantumState::basis(2, 0)).unwrap(), 2.0);
        assert!(matches!(
            expectation(&d, &s),
            Err(QcmlError::Schema(_))
        ));
    }

    #[test]
    fn expectation_matches_spectral_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let op = random_op(&mut rng, 5);
        let s = random_state(&mut rng, 5);
        let eig = eigh(&op).unwrap();
        let spectral: f64 = eig
            .eigenvalues
            .iter()
            .zip(&eig.eigenvectors)
            .map(|(l, v)| l * v.inner(&s).unwrap().norm_sqr())
            .sum();
        assert!((expectation(&op, &s).unwrap() - spectral).abs() < 1e-10);
    }

    #[test]
    fn fidelity_cases() {
        let e1 = QuantumState::basis(2, 0);
        let e2 = QuantumState::basis(2, 1);
        let plus = QuantumState::new(vec![c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert!((fidelity(&e1, &e1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(fidelity(&e1, &e2).unwrap(), 0.0);
        assert!((fidelity(&e1, &plus).unwrap() - 0.5).abs() < 1e-15);
        assert!(fidelity(&e1, &QuantumState::basis(3, 0)).is_err());
    }

    #[test]
    fn phase_convention_pins_representative() {
        let a = QuantumState::new(vec![c(0.0, 1.0), c(0.0, 2.0)]).unwrap();
        let b = QuantumState::new(vec![c(-1.0, 0.0), c(-2.0, 0.0)]).unwrap();
        assert_eq!(a, b);
        assert!(a.amplitudes()[1].im == 0.0 && a.amplitudes()[1].re > 0.0);
    }

    proptest! {
        #[test]
        fn rayleigh_bound(seed in 0u64..10_000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = random_op(&mut rng, n);
            let gs = ground_state(&op).unwrap();
            let phi = random_state(&mut rng, n);
            prop_assert!(gs.energy <= expectation(&op, &phi).unwrap() + 1e-12);
        }

        #[test]
        fn fidelity_symmetric_and_phase_invariant(seed in 0u64..10_000, theta in 0.0f64..6.283) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s1 = random_state(&mut rng, 4);
            let s2 = random_state(&mut rng, 4);
            let f12 = fidelity(&s1, &s2).unwrap();
            let f21 = fidelity(&s2, &s1).unwrap();
            prop_assert!((f12 - f21).abs() < 1e-15);
            let rotated = QuantumState::new(
                s1.amplitudes().iter().map(|z| z * Complex64::from_polar(1.0, theta)).collect()
            ).unwrap();
            prop_assert!((fidelity(&rotated, &s2).unwrap() - f12).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&f12));
        }
    }
}
