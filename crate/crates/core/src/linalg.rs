//! Dense row-major matrices and the spectral routines built on them.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, shape, Error, Result};

/// Default LayerNorm epsilon (BERT's value).
pub const DEFAULT_LN_EPS: f64 = 1e-12;

/// Relative residual tolerance for power iteration.
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Dense `rows × cols` matrix of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Builds a matrix from a list of equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Outer product `1·vᵀ`: every row equals `row`.
    pub fn repeat_row(n: usize, row: &[f64]) -> Self {
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Self::from_raw(n, row.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape(
                "matmul",
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(self.rows, rhs.cols, out))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(shape(
                "matmul_transposed",
                format!("{}x{} · ({}x{})ᵀ", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j))))
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(shape(
                "matvec",
                format!("{}x{} · vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row (the `1·bᵀ` term).
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(shape(
                "add_row_broadcast",
                format!("bias length {} vs {} columns", bias.len(), self.cols),
            ));
        }
        for i in 0..self.rows {
            for (a, b) in self.row_mut(i).iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> Matrix {
        self.map(|v| v.max(0.0))
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(shape(op, format!("{:?} vs {:?}", self.shape(), rhs.shape())));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Largest entrywise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of the result is row `perm[i]` of `self` (i.e. `P·self`).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Matrix> {
        check_permutation(perm, self.rows)?;
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// Maximum deviation of any row sum from 1.
    pub fn row_stochastic_error(&self) -> f64 {
        self.row_iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(invalid(format!("permutation of length {} for {n} rows", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(invalid(format!("not a permutation: {perm:?}")));
        }
    }
    Ok(())
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

// Matrices travel as nested arrays, one inner array per row.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for r in self.row_iter() {
            seq.serialize_element(r)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row-wise softmax in max-subtracted form.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Stabilized softmax of a single vector, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v_i)` without overflow.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// LayerNorm parameters for a `d`-dimensional representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    /// `gamma = 1`, `beta = 0`, `eps = 1e-12`.
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.beta.len() {
            return Err(shape(
                "LayerNormParams",
                format!("gamma length {} vs beta length {}", self.gamma.len(), self.beta.len()),
            ));
        }
        // eps = 0 is accepted for exact tests; constant rows then map to beta.
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("LayerNorm eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-row LayerNorm with population variance.
///
/// Returns the normalized matrix and, per token, the raw standard deviation
/// `sqrt(var)` taken before `eps` is added.
pub fn layer_norm(h: &Matrix, p: &LayerNormParams) -> Result<(Matrix, Vec<f64>)> {
    p.validate()?;
    let d = h.cols;
    if d < 2 {
        return Err(invalid(format!("layer_norm needs d >= 2, got {d}")));
    }
    if p.dim() != d {
        return Err(shape("layer_norm", format!("params for d={} applied to d={d}", p.dim())));
    }
    let mut out = Matrix::zeros(h.rows, d);
    let mut stds = Vec::with_capacity(h.rows);
    for i in 0..h.rows {
        let row = h.row(i);
        let first = row[0];
        // exact constant rows would otherwise leave a rounding residue in x - mean
        let (mean, var) = if row.iter().all(|&x| x == first) {
            (first, 0.0)
        } else {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            (mean, var)
        };
        stds.push(var.sqrt());
        let denom = (var + p.eps).sqrt();
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let centered = row[j] - mean;
            let z = if centered == 0.0 { 0.0 } else { centered / denom };
            *o = z * p.gamma[j] + p.beta[j];
        }
    }
    Ok((out, stds))
}

/// Result of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest eigenvalue of a symmetric positive-semidefinite operator.
///
/// Starts from the normalized ones vector, then the alternating `±1` vector,
/// then a fixed pseudo-random vector; the largest Rayleigh quotient wins.
/// A start orthogonal to the top eigenvector stalls on a smaller eigenvalue,
/// so the later starts cover that case. Each run stops once the residual
/// `‖Sv − ρv‖` drops below `POWER_TOL·ρ`.
pub(crate) fn psd_top_eigenvalue(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> SpectralEstimate {
    if dim == 0 {
        return SpectralEstimate { value: 0.0, iterations: 0, converged: true };
    }
    let mut rng = crate::rng::SplitMix64::new(0x05EE_D0F5_CA1E);
    let starts = [
        vec![1.0; dim],
        (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect::<Vec<_>>(),
        (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>(),
    ];
    let mut best: Option<SpectralEstimate> = None;
    let mut total_iters = 0;
    let mut all_converged = true;
    for start in starts {
        let est = power_run(start, &apply);
        total_iters += est.iterations;
        all_converged &= est.converged;
        if best.is_none_or(|b| est.value > b.value) {
            best = Some(est);
        }
    }
    let best = best.expect("at least one start");
    SpectralEstimate {
        value: best.value.max(0.0),
        iterations: total_iters,
        converged: all_converged,
    }
}

fn power_run(mut v: Vec<f64>, apply: &impl Fn(&[f64]) -> Vec<f64>) -> SpectralEstimate {
    let n0 = norm(&v);
    if n0 == 0.0 {
        return SpectralEstimate { value: 0.0, iterations: 0, converged: true };
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut rho = 0.0;
    for it in 1..=POWER_MAX_ITER {
        let w = apply(&v);
        rho = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 || !wn.is_finite() {
            // v lies in the null space
            return SpectralEstimate { value: 0.0, iterations: it, converged: wn == 0.0 };
        }
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rho * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= POWER_TOL * rho.abs() {
            return SpectralEstimate { value: rho, iterations: it, converged: true };
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    SpectralEstimate { value: rho, iterations: POWER_MAX_ITER, converged: false }
}

/// Largest singular value with convergence diagnostics.
pub fn sigma_max_estimate(w: &Matrix) -> SpectralEstimate {
    if w.data.iter().all(|&v| v == 0.0) {
        return SpectralEstimate { value: 0.0, iterations: 0, converged: true };
    }
    let est = psd_top_eigenvalue(w.cols, |v| {
        let wv = w.matvec(v).expect("dimension checked");
        let mut out = vec![0.0; w.cols];
        for (r, &c) in w.row_iter().zip(&wv) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += c * x;
            }
        }
        out
    });
    SpectralEstimate { value: est.value.sqrt(), ..est }
}

/// Largest singular value of `w`, by power iteration on `WᵀW`.
pub fn sigma_max(w: &Matrix) -> f64 {
    sigma_max_estimate(w).value
}

/// Builds `Âᵀ(I − eeᵀ)Â` with `e = n^{-1/2}·1`.
pub fn centered_gram(ahat: &Matrix) -> Result<Matrix> {
    if !ahat.is_square() {
        return Err(shape("centered_gram", format!("{}x{} is not square", ahat.rows, ahat.cols)));
    }
    let n = ahat.rows;
    // (I − eeᵀ)Â subtracts the column mean from every row
    let col_means: Vec<f64> = ahat.col_sums().into_iter().map(|s| s / n as f64).collect();
    let mut centered = ahat.clone();
    for i in 0..n {
        for (x, m) in centered.row_mut(i).iter_mut().zip(&col_means) {
            *x -= m;
        }
    }
    let g = centered.transpose().matmul(&centered)?;
    // symmetrize away rounding asymmetry
    Ok(Matrix::from_fn(n, n, |i, j| 0.5 * (g.get(i, j) + g.get(j, i))))
}

pub fn lambda_max_centered_estimate(ahat: &Matrix) -> Result<SpectralEstimate> {
    let g = centered_gram(ahat)?;
    Ok(psd_top_eigenvalue(g.rows, |v| g.matvec(v).expect("square")))
}

/// Largest eigenvalue of `Âᵀ(I − eeᵀ)Â`, clamped to be non-negative.
pub fn lambda_max_centered(ahat: &Matrix) -> Result<f64> {
    lambda_max_centered_estimate(ahat).map(|e| e.value)
}
