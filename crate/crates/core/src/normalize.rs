//! Attention normalizers. All of them take logits, not positive kernels.
//!
//! Sinkhorn runs in the log domain: a row pass subtracts the row
//! log-sum-exp, a column pass subtracts the column log-sum-exp, and one sweep
//! is a row pass followed by a column pass. Column sums are therefore exact
//! after every sweep and the row deviation is the quantity that converges.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Logits below this are hard zeros of the kernel.
pub const LOGIT_FLOOR: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    /// Number of row+column sweeps allowed.
    pub max_iters: usize,
    /// Target for `max(row_dev, col_dev)`.
    pub tol: f64,
    /// When false, always run exactly `max_iters` sweeps. Used where the
    /// result must match the unrolled training graph.
    #[serde(default = "default_true")]
    pub early_stop: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            early_stop: true,
        }
    }
}

impl SinkhornParams {
    pub fn new(max_iters: usize, tol: f64) -> Result<Self> {
        let p = Self {
            max_iters,
            tol,
            early_stop: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Exactly `k` sweeps, no early exit.
    pub fn fixed(k: usize) -> Self {
        Self {
            max_iters: k,
            early_stop: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("sinkhorn max_iters must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("sinkhorn tol must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    /// Row-wise softmax: row-stochastic attention.
    SoftmaxRows,
    /// Sinkhorn scaling: doubly stochastic attention.
    Sinkhorn,
}

impl NormalizerKind {
    pub const ALL: [NormalizerKind; 2] = [NormalizerKind::SoftmaxRows, NormalizerKind::Sinkhorn];

    /// Short name used in CSV output.
    pub fn label(self) -> &'static str {
        match self {
            NormalizerKind::SoftmaxRows => "softmax",
            NormalizerKind::Sinkhorn => "sinkhorn",
        }
    }
}

impl fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" | "softmax_rows" => Ok(NormalizerKind::SoftmaxRows),
            "sinkhorn" => Ok(NormalizerKind::Sinkhorn),
            other => Err(Error::invalid(format!("unknown normalizer '{other}'"))),
        }
    }
}

/// Result of a Sinkhorn run.
#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    pub p: Mat,
    pub converged: bool,
    pub iterations: usize,
    pub row_dev: f64,
    pub col_dev: f64,
}

/// A normalized attention matrix plus whether the normalizer converged.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub p: Mat,
    pub converged: bool,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Subtracts each row's log-sum-exp in place.
pub(crate) fn log_row_normalize(l: &mut Mat) {
    for i in 0..l.rows() {
        let row = l.row_mut(i);
        let lse = log_sum_exp(row.iter().copied());
        row.iter_mut().for_each(|x| *x -= lse);
    }
}

/// Subtracts each column's log-sum-exp in place.
pub(crate) fn log_col_normalize(l: &mut Mat) {
    let (r, c) = l.shape();
    for j in 0..c {
        let lse = log_sum_exp((0..r).map(|i| l[(i, j)]));
        for i in 0..r {
            l[(i, j)] -= lse;
        }
    }
}

pub(crate) fn clamp_logits(s: &Mat) -> Mat {
    s.map(|x| x.max(LOGIT_FLOOR))
}

/// `exp(row − rowmax)` normalized per row.
pub fn softmax_rows(s: &Mat) -> Mat {
    let mut l = s.clone();
    log_row_normalize(&mut l);
    l.map(f64::exp)
}

/// Column-wise softmax, the transpose dual of [`softmax_rows`].
pub fn softmax_cols(s: &Mat) -> Mat {
    softmax_rows(&s.transpose()).transpose()
}

/// Max `|row sum − 1|` and max `|column sum − 1|`.
pub fn stochasticity_deviation(p: &Mat) -> (f64, f64) {
    let dev = |sums: Vec<f64>| sums.into_iter().fold(0.0, |m, s| f64::max(m, (s - 1.0).abs()));
    (dev(p.row_sums()), dev(p.col_sums()))
}

/// Log-domain Sinkhorn on logits `s`. Returns the best iterate with its
/// deviation when `tol` is not reached.
pub fn sinkhorn(s: &Mat, params: &SinkhornParams) -> Result<SinkhornOutput> {
    params.validate()?;
    if s.rows() == 0 {
        return Err(Error::invalid("sinkhorn on an empty matrix"));
    }
    if !s.is_square() {
        return Err(Error::invalid(format!(
            "sinkhorn needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let mut l = clamp_logits(s);
    let mut out = None;
    for k in 1..=params.max_iters {
        log_row_normalize(&mut l);
        log_col_normalize(&mut l);
        if params.early_stop || k == params.max_iters {
            let p = l.map(f64::exp);
            let (row_dev, col_dev) = stochasticity_deviation(&p);
            let converged = row_dev.max(col_dev) <= params.tol;
            if (params.early_stop && converged) || k == params.max_iters {
                out = Some(SinkhornOutput {
                    p,
                    converged,
                    iterations: k,
                    row_dev,
                    col_dev,
                });
                break;
            }
        }
    }
    Ok(out.expect("loop always produces an output on its final sweep"))
}

/// Runs the configured normalizer.
pub fn normalize(s: &Mat, kind: NormalizerKind, params: &SinkhornParams) -> Result<Normalized> {
    match kind {
        NormalizerKind::SoftmaxRows => Ok(Normalized {
            p: softmax_rows(s),
            converged: true,
        }),
        NormalizerKind::Sinkhorn => {
            let out = sinkhorn(s, params)?;
            Ok(Normalized {
                p: out.p,
                converged: out.converged,
            })
        }
    }
}

/// Sinkhorn returning `D = P − (1/n)11ᵀ` rather than `P`.
///
/// Works on `Z = log(n P)`, which stays near zero when the logits are small,
/// and uses `expm1`/`ln_1p` so `D` keeps full relative precision even when
/// it is far below the rounding level of the entries of `P` itself. Runs
/// until the scaling potentials stop moving at machine precision or
/// `max_iters` sweeps.
pub fn sinkhorn_deviation(s: &Mat, params: &SinkhornParams) -> Result<(Mat, bool)> {
    params.validate()?;
    if s.rows() == 0 || !s.is_square() {
        return Err(Error::invalid("sinkhorn_deviation needs a nonempty square matrix"));
    }
    let n = s.rows();
    let shift = s.sum() / (n * n) as f64;
    let mut z = s.map(|x| x - shift);
    if z.max_abs() > 700.0 {
        return Err(Error::invalid(
            "sinkhorn_deviation: logit spread too large for the deviation form",
        ));
    }
    let mut converged = false;
    for _ in 0..params.max_iters {
        let mut moved = 0.0f64;
        for i in 0..n {
            let row = z.row_mut(i);
            let a = (row.iter().map(|x| x.exp_m1()).sum::<f64>() / n as f64).ln_1p();
            row.iter_mut().for_each(|x| *x -= a);
            moved = moved.max(a.abs());
        }
        for j in 0..n {
            let b = ((0..n).map(|i| z[(i, j)].exp_m1()).sum::<f64>() / n as f64).ln_1p();
            for i in 0..n {
                z[(i, j)] -= b;
            }
            moved = moved.max(b.abs());
        }
        if moved <= 4.0 * f64::EPSILON * z.max_abs() {
            converged = true;
            break;
        }
    }
    Ok((z.map(|x| x.exp_m1() / n as f64), converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softmax_rows_examples() {
        let p = softmax_rows(&Mat::zeros(3, 3));
        assert!(p.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_rows(&Mat::from_rows(&[[0.0, 2f64.ln()]]));
        assert!((p[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_row_shift_invariance() {
        let mut r = rng::seeded(11);
        let s = rng::gaussian(&mut r, 5, 7, 2.0);
        let u = [3.0, -1.0, 0.5, 100.0, -40.0];
        let shifted = Mat::from_fn(5, 7, |i, j| s[(i, j)] + u[i]);
        assert!(softmax_rows(&s).max_abs_diff(&softmax_rows(&shifted)) <= 1e-12);
        let (row_dev, _) = stochasticity_deviation(&softmax_rows(&s));
        assert!(row_dev <= 1e-12);
    }

    #[test]
    fn softmax_cols_examples() {
        let p = softmax_cols(&Mat::zeros(2, 2));
        assert!(p.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let p = softmax_cols(&Mat::from_rows(&[[0.0], [3f64.ln()]]));
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15 && (p[(1, 0)] - 0.75).abs() < 1e-15);
        let mut r = rng::seeded(5);
        let s = rng::gaussian(&mut r, 4, 6, 1.0);
        assert_eq!(softmax_cols(&s), softmax_rows(&s.transpose()).transpose());
        let (_, col_dev) = stochasticity_deviation(&softmax_cols(&s));
        assert!(col_dev <= 1e-12);
    }

    #[test]
    fn sinkhorn_uniform_fixed_point() {
        for n in [1, 2, 5, 16] {
            let out = sinkhorn(&Mat::zeros(n, n), &SinkhornParams::default()).unwrap();
            assert!(out.converged);
            assert_eq!(out.iterations, 1);
            let u = 1.0 / n as f64;
            assert!(out.p.as_slice().iter().all(|&x| (x - u).abs() < 1e-15));
        }
    }

    #[test]
    fn sinkhorn_permutation_fixed_point() {
        let perm = [2usize, 0, 3, 1];
        let s = Mat::from_fn(4, 4, |i, j| if perm[i] == j { 0.0 } else { LOGIT_FLOOR });
        let out = sinkhorn(&s, &SinkhornParams::default()).unwrap();
        let expect = s.map(|x| if x == 0.0 { 1.0 } else { 0.0 });
        assert!(out.p.max_abs_diff(&expect) <= 1e-6);
        // Logits far below the floor behave identically.
        let deeper = s.map(|x| if x == 0.0 { 0.0 } else { -1e300 });
        assert_eq!(sinkhorn(&deeper, &SinkhornParams::default()).unwrap().p, out.p);
    }

    /// Plain alternating R/C scaling on the positive kernel, run long.
    fn alternating_oracle(s: &Mat, sweeps: usize) -> Mat {
        let mut y = s.map(f64::exp);
        for _ in 0..sweeps {
            let rs = y.row_sums();
            y = Mat::from_fn(y.rows(), y.cols(), |i, j| y[(i, j)] / rs[i]);
            let cs = y.col_sums();
            y = Mat::from_fn(y.rows(), y.cols(), |i, j| y[(i, j)] / cs[j]);
        }
        y
    }

    #[test]
    fn sinkhorn_two_by_two_matches_long_alternation() {
        let s = Mat::from_rows(&[[0.0, 2f64.ln()], [3f64.ln(), 0.0]]);
        let oracle = alternating_oracle(&s, 1000);
        let p = sinkhorn(&s, &SinkhornParams::new(1000, 1e-15).unwrap())
            .unwrap()
            .p;
        assert!(p.max_abs_diff(&oracle) <= 1e-9);
        let a = p[(0, 0)];
        assert!((p[(0, 1)] - (1.0 - a)).abs() < 1e-9);
        assert!((p[(1, 0)] - (1.0 - a)).abs() < 1e-9);
        assert!((p[(1, 1)] - a).abs() < 1e-9);
        // Cross ratio of the kernel is preserved: (a/(1-a))² = 1/6.
        assert!(((a / (1.0 - a)).powi(2) - 1.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let mut r = rng::seeded(9);
        let s = rng::gaussian(&mut r, 12, 12, 8.0);
        let out = sinkhorn(&s, &SinkhornParams::new(1, 1e-14).unwrap()).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.col_dev <= 1e-12, "final pass is a column pass");
        assert!(out.row_dev > 1e-14);
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let p = SinkhornParams::default();
        assert!(sinkhorn(&Mat::zeros(0, 0), &p).is_err());
        assert!(sinkhorn(&Mat::zeros(2, 3), &p).is_err());
        assert!(SinkhornParams::new(0, 1e-6).is_err());
        assert!(SinkhornParams::new(5, 0.0).is_err());
    }

    #[test]
    fn fixed_params_run_every_sweep() {
        let out = sinkhorn(&Mat::zeros(3, 3), &SinkhornParams::fixed(7)).unwrap();
        assert_eq!(out.iterations, 7);
        assert!(out.converged);
    }

    #[test]
    fn deviation_form_agrees_with_plain_sinkhorn() {
        let mut r = rng::seeded(21);
        let s = rng::gaussian(&mut r, 6, 6, 0.3);
        let tight = SinkhornParams::new(500, 1e-15).unwrap();
        let p = sinkhorn(&s, &tight).unwrap().p;
        let (d, converged) = sinkhorn_deviation(&s, &tight).unwrap();
        assert!(converged);
        let rebuilt = d.map(|x| x + 1.0 / 6.0);
        assert!(rebuilt.max_abs_diff(&p) <= 1e-14);
    }

    #[test]
    fn deviation_form_keeps_precision_for_tiny_logits() {
        // For logits εY the deviation is (ε/n)Q(Y) to first order; at ε = 1e-30
        // the plain form would return exactly uniform entries.
        let mut r = rng::seeded(4);
        let y = rng::gaussian(&mut r, 5, 5, 1.0);
        let eps = 1e-30;
        let (d, _) = sinkhorn_deviation(&y.scale(eps), &SinkhornParams::default()).unwrap();
        let q = crate::project::project_tds(&y).unwrap();
        let expect = q.scale(eps / 5.0);
        assert!(d.max_abs_diff(&expect) <= 1e-12 * expect.max_abs());
    }
}
