//! Dense row-major `f64` matrices and the norm toolkit used everywhere else.
//!
//! Only the top two singular values are ever needed in production code, so
//! there is no full SVD here: [`top_singular_triplet`] runs power iteration on
//! `MᵀM` and callers deflate when they need σ₂.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative tolerance on successive σ estimates.
pub const POWER_TOL: f64 = 1e-12;
/// Iteration cap for power iteration.
pub const POWER_MAX_ITERS: usize = 5000;
/// Step size below which the singular vector is considered settled.
const VECTOR_TOL: f64 = 1e-10;
/// Amplitude of the seeded perturbation of the all-ones start vector.
const START_NOISE: f64 = 1e-3;
const START_SEED: u64 = 0x5EED_0F_5EED;

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Checked constructor: length must match and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked-for-finiteness constructor for internal arithmetic.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(d: &[f64]) -> Self {
        Self::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Builds from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self::from_vec(r, c, data)
    }

    /// Single row `1×n`.
    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    /// Single column `n×1`.
    pub fn col_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Mat::from_vec(n, m, out))
    }

    /// `self · v` for a vector of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · w` for a vector of length `rows`.
    pub fn tr_mul_vec(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &wi) in w.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += wi * a;
            }
        }
        out
    }

    fn zip_with(&self, rhs: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Mat::from_vec(self.rows, self.cols, data))
    }

    pub fn add(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    /// Adds a `1×cols` row to every row (the `1 bᵀ` bias term).
    pub fn add_row_broadcast(&self, row: &[f64]) -> Result<Mat> {
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(row) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.tr_mul_vec(&vec![1.0; self.rows])
    }

    /// `x = (1/n) Xᵀ 1`, the mean token representation.
    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Frobenius inner product `⟨A, B⟩_F`.
    pub fn frobenius_dot(&self, rhs: &Mat) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "frobenius_dot",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(dot(&self.data, &rhs.data))
    }

    /// Horizontal concatenation `[A | B | ...]`.
    pub fn hcat(blocks: &[Mat]) -> Result<Mat> {
        let rows = blocks.first().map_or(0, Mat::rows);
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hcat",
                left: (rows, 0),
                right: b.shape(),
            });
        }
        let cols = blocks.iter().map(Mat::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Mat::from_vec(rows, cols, data))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        Mat::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Mat {
        Mat::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    /// Largest absolute entrywise difference; `∞` on shape mismatch.
    pub fn max_abs_diff(&self, rhs: &Mat) -> f64 {
        if self.shape() != rhs.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

// Serialized as nested row-major arrays, the checkpoint convention.
impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Mat::new(r, c, rows.into_iter().flatten().collect()).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Top singular value with its left/right singular vectors.
#[derive(Clone, Debug)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// False when power iteration hit the cap, which happens when σ₁ and σ₂
    /// are nearly tied. σ is still a good estimate in that case.
    pub converged: bool,
    pub iterations: usize,
}

/// Root-sum-of-squares of the entries.
pub fn frobenius_norm(m: &Mat) -> f64 {
    norm2(m.as_slice())
}

/// Max column absolute sum.
pub fn norm_1(m: &Mat) -> f64 {
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Max row absolute sum.
pub fn norm_inf(m: &Mat) -> f64 {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `√(‖M‖₁ ‖M‖∞)`, an upper bound on the spectral norm.
pub fn norm_1inf(m: &Mat) -> f64 {
    (norm_1(m) * norm_inf(m)).sqrt()
}

/// σ₁(M). Logs a warning if power iteration did not settle.
pub fn spectral_norm(m: &Mat) -> f64 {
    let (sigma, converged) = power_sigma(m);
    if !converged {
        log::warn!(
            "spectral_norm: power iteration hit {POWER_MAX_ITERS} iterations on a {}x{} matrix",
            m.rows(),
            m.cols()
        );
    }
    sigma
}

/// σ₁ with the convergence flag, without logging.
pub fn spectral_norm_checked(m: &Mat) -> (f64, bool) {
    power_sigma(m)
}

/// `(σ₁, u₁, v₁)` with `M v₁ = σ₁ u₁`; the first nonzero entry of `u₁` is positive.
pub fn top_singular_triplet(m: &Mat) -> Result<SingularTriplet> {
    if m.is_empty() {
        return Err(Error::invalid("top_singular_triplet of an empty matrix"));
    }
    let it = power_iterate(m, true);
    if !it.converged {
        log::warn!("top_singular_triplet: near-degenerate top singular pair");
    }
    let mut v = it.v;
    let mut u = m.mul_vec(&v);
    let sigma = norm2(&u);
    if sigma > 0.0 {
        u.iter_mut().for_each(|x| *x /= sigma);
    } else {
        u = vec![0.0; m.rows()];
        u[0] = 1.0;
    }
    let flip = u
        .iter()
        .find(|x| x.abs() > 1e-14)
        .is_some_and(|&x| x < 0.0);
    if flip {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(SingularTriplet {
        sigma,
        u,
        v,
        converged: it.converged,
        iterations: it.iterations,
    })
}

/// σ₂(M), the spectral norm of `M − σ₁u₁v₁ᵀ`.
pub fn second_singular_value(m: &Mat) -> Result<f64> {
    let t = top_singular_triplet(m)?;
    let deflated = m.sub(&Mat::outer(&t.u, &t.v).scale(t.sigma))?;
    Ok(spectral_norm(&deflated))
}

struct PowerOutcome {
    sigma_sq: f64,
    v: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn power_sigma(m: &Mat) -> (f64, bool) {
    if m.is_empty() {
        return (0.0, true);
    }
    let it = power_iterate(m, false);
    (it.sigma_sq.sqrt(), it.converged)
}

fn start_vector(n: usize) -> Vec<f64> {
    let mut rng = crate::rng::seeded(START_SEED ^ n as u64);
    let mut v: Vec<f64> = (0..n)
        .map(|_| 1.0 + START_NOISE * rng.random_range(-1.0..1.0))
        .collect();
    let s = norm2(&v);
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Power iteration on `MᵀM`. With `need_vector`, also waits for the iterate
/// itself to stop moving, which the deflation step depends on.
fn power_iterate(m: &Mat, need_vector: bool) -> PowerOutcome {
    let mut v = start_vector(m.cols());
    let mut sigma_sq = 0.0;
    for k in 1..=POWER_MAX_ITERS {
        let w = m.mul_vec(&v);
        let new_sigma_sq = dot(&w, &w);
        let mut z = m.tr_mul_vec(&w);
        let zn = norm2(&z);
        if zn == 0.0 || new_sigma_sq == 0.0 {
            return PowerOutcome {
                sigma_sq: 0.0,
                v,
                converged: true,
                iterations: k,
            };
        }
        z.iter_mut().for_each(|x| *x /= zn);
        let step = v
            .iter()
            .zip(&z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let sigma_settled = (new_sigma_sq - sigma_sq).abs() <= POWER_TOL * new_sigma_sq;
        sigma_sq = new_sigma_sq;
        v = z;
        if sigma_settled && (!need_vector || step <= VECTOR_TOL) {
            // Rayleigh quotient at the final iterate.
            let w = m.mul_vec(&v);
            return PowerOutcome {
                sigma_sq: dot(&w, &w).max(sigma_sq),
                v,
                converged: true,
                iterations: k,
            };
        }
    }
    PowerOutcome {
        sigma_sq,
        v,
        converged: false,
        iterations: POWER_MAX_ITERS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spectral_norm_is_one() {
        assert!((spectral_norm(&Mat::identity(3)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_spectral_norm_is_max_entry() {
        assert!((spectral_norm(&Mat::diag(&[3.0, 4.0])) - 4.0).abs() < 1e-12);
        assert!((spectral_norm(&Mat::diag(&[-5.0, 4.0])) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Mat::zeros(3, 2)), 0.0);
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!((frobenius_norm(&m) - 30f64.sqrt()).abs() < 1e-15);
        assert!(frobenius_norm(&m) >= spectral_norm(&m));
    }

    #[test]
    fn norm_1inf_examples() {
        assert!((norm_1inf(&Mat::identity(5)) - 1.0).abs() < 1e-15);
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(norm_1(&m), 6.0);
        assert_eq!(norm_inf(&m), 7.0);
        assert!((norm_1inf(&m) - 42f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn triplet_of_diagonal() {
        let t = top_singular_triplet(&Mat::diag(&[3.0, 4.0])).unwrap();
        assert!((t.sigma - 4.0).abs() < 1e-12);
        assert!(t.u[0].abs() < 1e-9 && (t.u[1] - 1.0).abs() < 1e-12);
        assert!(t.v[0].abs() < 1e-9 && (t.v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_of_rank_one_reconstructs() {
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.4, -1.0, 2.0];
        let m = Mat::outer(&u, &v);
        let t = top_singular_triplet(&m).unwrap();
        let rebuilt = Mat::outer(&t.u, &t.v).scale(t.sigma);
        assert!(spectral_norm(&m.sub(&rebuilt).unwrap()) <= 1e-10);
        assert!(t.u[0] > 0.0, "sign convention");
        assert!((norm2(&t.u) - 1.0).abs() < 1e-10);
        assert!((norm2(&t.v) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        assert_eq!(spectral_norm(&Mat::zeros(4, 3)), 0.0);
        let t = top_singular_triplet(&Mat::zeros(2, 2)).unwrap();
        assert_eq!(t.sigma, 0.0);
    }

    #[test]
    fn second_singular_value_of_diagonal() {
        let s2 = second_singular_value(&Mat::diag(&[1.0, 5.0, 3.0])).unwrap();
        assert!((s2 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Mat::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Mat::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn json_round_trip_is_nested_rows() {
        let m = Mat::from_rows(&[[1.0, 2.5], [-3.0, 0.125]]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.5],[-3.0,0.125]]");
        let back: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<Mat>("[[1.0],[2.0,3.0]]").is_err());
    }
}
