#![allow(dead_code)]

use sinkrank::Mat;

/// Singular values in descending order by one-sided Jacobi rotations on the
/// columns of a copy of `m`.
pub fn jacobi_singular_values(m: &Mat) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[p][i], a[q][i]);
                    a[p][i] = c * x - s * y;
                    a[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Product of matrices applied right to left: `ms[k−1] ⋯ ms[0]`, one entry
/// at a time with explicit loops.
pub fn naive_product(ms: &[Mat]) -> Mat {
    let mut acc = ms[0].clone();
    for m in &ms[1..] {
        let (r, k, c) = (m.rows(), m.cols(), acc.cols());
        acc = Mat::from_fn(r, c, |i, j| {
            let mut s = 0.0;
            for l in 0..k {
                s += m[(i, l)] * acc[(l, j)];
            }
            s
        });
    }
    acc
}

/// Feature-wise centering and spectral norms through the SVD oracle.
pub fn normalized_residual_oracle(x: &Mat) -> Option<f64> {
    let (n, d) = x.shape();
    let res = Mat::from_fn(n, d, |i, j| {
        let mean: f64 = (0..n).map(|k| x[(k, j)]).sum::<f64>() / n as f64;
        x[(i, j)] - mean
    });
    let top = jacobi_singular_values(x)[0];
    (top > 0.0).then(|| jacobi_singular_values(&res)[0] / top)
}
