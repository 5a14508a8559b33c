//! The orthogonal projector `Q(Y) = U Y U`, `U = I − (1/n)11ᵀ`, onto matrices
//! with zero row and column sums, and first-order checks of the normalizers
//! around the uniform matrix.

use crate::error::{Error, Result};
use crate::mat::{frobenius_norm, Mat};
use crate::normalize::{sinkhorn, softmax_cols, softmax_rows, SinkhornParams};

/// How far a matrix is from having zero row and column sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdsCheck {
    pub row_zero_dev: f64,
    pub col_zero_dev: f64,
}

pub fn tds_check(h: &Mat) -> TdsCheck {
    let max_abs = |v: Vec<f64>| v.into_iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    TdsCheck {
        row_zero_dev: max_abs(h.row_sums()),
        col_zero_dev: max_abs(h.col_sums()),
    }
}

/// `Q(Y) = U Y U`: subtract column means, then row means.
pub fn project_tds(y: &Mat) -> Result<Mat> {
    if !y.is_square() {
        return Err(Error::invalid(format!(
            "project_tds needs a square matrix, got {}x{}",
            y.rows(),
            y.cols()
        )));
    }
    let n = y.rows();
    let col_means = y.col_means();
    let mut out = Mat::from_fn(n, n, |i, j| y[(i, j)] - col_means[j]);
    for i in 0..n {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    Ok(out)
}

/// `‖F − (1/n)11ᵀ − slope·Q(Y)‖_F` for an operator output `F`.
pub fn linearization_residual(output: &Mat, y: &Mat, slope: f64) -> Result<f64> {
    let n = y.rows() as f64;
    let q = project_tds(y)?;
    let approx = q.scale(slope).map(|x| x + 1.0 / n);
    Ok(frobenius_norm(&output.sub(&approx)?))
}

/// Error of a first-order expansion, with the normalizer's convergence flag.
#[derive(Clone, Copy, Debug)]
pub struct LinearizationError {
    pub error: f64,
    pub converged: bool,
}

/// `‖Sinkhorn(tY) − (1/n)11ᵀ − (t/n²)Q(Y)‖_F`.
///
/// The `t/n²` slope is the one the rank-decay bounds are built on. Full
/// Sinkhorn scaling actually has slope `t/n` at zero (see
/// [`sinkhorn_first_order_slope`]), so this error is `Θ(t)`, not `o(t)`.
pub fn sinkhorn_linearization_error(
    y: &Mat,
    t: f64,
    params: &SinkhornParams,
) -> Result<LinearizationError> {
    check_t(t)?;
    let n = y.rows() as f64;
    let out = sinkhorn(&y.scale(t), params)?;
    Ok(LinearizationError {
        error: linearization_residual(&out.p, y, t / (n * n))?,
        converged: out.converged,
    })
}

/// Slope of `Sinkhorn(tY)` along `Q(Y)` at `t = 0`: `t/n`.
///
/// Row scaling gives `(1/n)11ᵀ + (t/n)YU`; column scaling of that by
/// division (not by a second softmax) gives `(1/n)11ᵀ + (t/n)UYU`.
pub fn sinkhorn_first_order_slope(n: usize, t: f64) -> f64 {
    t / n as f64
}

/// `‖(C∘R)(tY) − (1/n)11ᵀ − (t/n²)Q(Y)‖_F` with `R` row softmax and `C`
/// column softmax applied to the output of `R`.
pub fn cr_linearization_error(y: &Mat, t: f64) -> Result<f64> {
    check_t(t)?;
    if !y.is_square() {
        return Err(Error::invalid("cr_linearization_error needs a square matrix"));
    }
    let n = y.rows() as f64;
    let f = softmax_cols(&softmax_rows(&y.scale(t)));
    linearization_residual(&f, y, t / (n * n))
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("t must be positive and finite, got {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tight() -> SinkhornParams {
        SinkhornParams::new(2000, 1e-15).unwrap()
    }

    #[test]
    fn constant_matrix_is_annihilated() {
        let q = project_tds(&Mat::ones(4, 4)).unwrap();
        assert!(q.max_abs() < 1e-15);
    }

    #[test]
    fn tds_matrices_are_fixed() {
        let h = Mat::from_rows(&[[1.0, -1.0, 0.0], [-2.0, 1.0, 1.0], [1.0, 0.0, -1.0]]);
        assert_eq!(tds_check(&h).row_zero_dev, 0.0);
        assert!(project_tds(&h).unwrap().max_abs_diff(&h) < 1e-15);
    }

    /// Elementwise formula `Q(E_ij)_{αβ} = δ_iα δ_jβ − δ_jβ/n − δ_iα/n + 1/n²`.
    fn q_elementary(n: usize, i: usize, j: usize) -> Mat {
        let nf = n as f64;
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        Mat::from_fn(n, n, |a, b| d(i, a) * d(j, b) - d(j, b) / nf - d(i, a) / nf + 1.0 / (nf * nf))
    }

    #[test]
    fn elementary_matrix_matches_formula() {
        let e11 = Mat::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let q = project_tds(&e11).unwrap();
        let expect = Mat::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]);
        assert!(q.max_abs_diff(&expect) < 1e-15);
        assert!(q.max_abs_diff(&q_elementary(2, 0, 0)) < 1e-15);
        for (i, j) in [(0, 2), (3, 1), (2, 2)] {
            let e = Mat::from_fn(4, 4, |a, b| if (a, b) == (i, j) { 1.0 } else { 0.0 });
            assert!(project_tds(&e).unwrap().max_abs_diff(&q_elementary(4, i, j)) < 1e-15);
        }
    }

    #[test]
    fn rectangular_input_rejected() {
        assert!(project_tds(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_direction_has_zero_error() {
        let y = Mat::zeros(5, 5);
        assert_eq!(sinkhorn_linearization_error(&y, 0.3, &tight()).unwrap().error, 0.0);
        assert_eq!(cr_linearization_error(&y, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn shift_directions_have_zero_sinkhorn_error() {
        let u = [0.3, -1.0, 2.0, 0.1];
        let v = [1.5, 0.0, -0.7, 0.2];
        let y = Mat::from_fn(4, 4, |i, j| u[i] + v[j]);
        assert!(project_tds(&y).unwrap().max_abs() < 1e-15);
        for t in [1.0, 1e-1, 1e-3] {
            let e = sinkhorn_linearization_error(&y, t, &tight()).unwrap();
            assert!(e.error <= 1e-13, "t={t} err={}", e.error);
        }
    }

    #[test]
    fn sinkhorn_error_with_inverse_square_slope_is_first_order() {
        // error(t)/t tends to (1/n − 1/n²)‖Q(Y)‖_F: the t/n² slope is off by a
        // factor n from the actual derivative.
        let mut r = rng::seeded(3);
        let n = 8;
        let y = rng::gaussian(&mut r, n, n, 1.0);
        let qn = frobenius_norm(&project_tds(&y).unwrap());
        let limit = (1.0 / n as f64 - 1.0 / (n * n) as f64) * qn;
        let mut ratios = Vec::new();
        for t in [1e-1, 1e-2, 1e-3] {
            let e = sinkhorn_linearization_error(&y, t, &tight()).unwrap();
            assert!(e.converged);
            ratios.push(e.error / t);
        }
        assert!((ratios[2] - limit).abs() <= 1e-2 * limit, "{ratios:?} vs {limit}");
        assert!(ratios[1] / ratios[2] < 1.5);
    }

    #[test]
    fn sinkhorn_with_inverse_n_slope_is_o_t() {
        let mut r = rng::seeded(3);
        let n = 8;
        let y = rng::gaussian(&mut r, n, n, 1.0);
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&t| {
                let p = sinkhorn(&y.scale(t), &tight()).unwrap().p;
                linearization_residual(&p, &y, sinkhorn_first_order_slope(n, t)).unwrap() / t
            })
            .collect();
        assert!(errs[0] / errs[1] > 8.0 && errs[1] / errs[2] > 8.0, "{errs:?}");
    }

    #[test]
    fn cr_error_is_quadratic() {
        let mut r = rng::seeded(17);
        let y = rng::gaussian(&mut r, 8, 8, 1.0);
        let e2 = cr_linearization_error(&y, 1e-2).unwrap();
        let c = e2 / 1e-4;
        let e3 = cr_linearization_error(&y, 1e-3).unwrap();
        assert!(e3 <= 1.5 * c * 1e-6, "e3={e3} c={c}");
    }

    #[test]
    fn non_positive_t_rejected() {
        let y = Mat::zeros(2, 2);
        assert!(cr_linearization_error(&y, 0.0).is_err());
        assert!(sinkhorn_linearization_error(&y, -1.0, &tight()).is_err());
    }
}
