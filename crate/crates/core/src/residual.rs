//! Rank-collapse metrics: the row-mean residual of token representations,
//! products of attention matrices along sampled paths, and per-layer curves.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnStore;
use crate::error::{Error, Result};
use crate::mat::{spectral_norm, top_singular_triplet, Mat};
use crate::par::{self, Exec};
use crate::rng;

/// `res(X) = X − 1xᵀ` with `x` the mean over rows (tokens). Columns whose
/// entries are all equal map to exact zeros.
pub fn residual(x: &Mat) -> Mat {
    let mut means = x.col_means();
    for (j, m) in means.iter_mut().enumerate() {
        if x.rows() > 0 && (0..x.rows()).all(|i| x[(i, j)] == x[(0, j)]) {
            *m = x[(0, j)];
        }
    }
    Mat::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - means[j])
}

/// `‖res(X)‖₂ / ‖X‖₂`, or `None` for a zero matrix.
pub fn normalized_residual(x: &Mat) -> Option<f64> {
    let norm = spectral_norm(x);
    if norm == 0.0 {
        return None;
    }
    Some(spectral_norm(&residual(x)) / norm)
}

/// One attention path: `t` layers (increasing, 0-based) with a head and a
/// batch element drawn for each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub depth: usize,
    pub layer_indices: Vec<usize>,
    pub head_indices: Vec<usize>,
    pub batch_indices: Vec<usize>,
    pub normalized_residual: f64,
}

/// `P^{ℓ_t} ⋯ P^{ℓ_1}` for the selected factors.
pub fn path_product(store: &AttnStore, s: &PathSample) -> Result<Mat> {
    let t = s.layer_indices.len();
    if t == 0 || s.head_indices.len() != t || s.batch_indices.len() != t {
        return Err(Error::invalid("path sample index lists must be nonempty and equal length"));
    }
    if s.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("path layer indices must be strictly increasing"));
    }
    let mut prod: Option<Mat> = None;
    for k in 0..t {
        let (l, h, b) = (s.layer_indices[k], s.head_indices[k], s.batch_indices[k]);
        let p = store
            .p
            .get(l)
            .and_then(|heads| heads.get(h))
            .and_then(|batch| batch.get(b))
            .ok_or_else(|| Error::OutOfRange(format!("path factor (layer {l}, head {h}, batch {b})")))?;
        prod = Some(match prod {
            None => p.clone(),
            Some(acc) => p.matmul(&acc)?,
        });
    }
    Ok(prod.expect("t >= 1"))
}

/// `σ₂/σ₁`: spectral norm of the best rank-one deflation over the spectral norm.
pub fn path_residual(p: &Mat) -> Result<f64> {
    if p.max_abs() == 0.0 {
        return Err(Error::ZeroMatrix("path_residual"));
    }
    let top = top_singular_triplet(p)?;
    let deflated = p.sub(&Mat::outer(&top.u, &top.v).scale(top.sigma))?;
    Ok(spectral_norm(&deflated) / top.sigma)
}

/// Draws `samples` paths of depth `t`: a uniform `t`-subset of layers, sorted,
/// then an independent head and batch element per selected layer. Sample `i`
/// uses its own generator derived from `(seed, i)`.
pub fn sample_paths(store: &AttnStore, t: usize, samples: usize, seed: u64) -> Result<Vec<PathSample>> {
    sample_paths_with(Exec::default(), store, t, samples, seed)
}

pub fn sample_paths_with(
    exec: Exec,
    store: &AttnStore,
    t: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    let (layers, heads, batch) = (store.layers(), store.heads(), store.batch());
    if layers == 0 || heads == 0 || batch == 0 {
        return Err(Error::invalid("empty attention store"));
    }
    if t == 0 || t > layers {
        return Err(Error::invalid(format!("path depth {t} outside 1..={layers}")));
    }
    par::try_map_indexed(exec, samples, |i| {
        let mut r = rng::seeded(rng::derive(seed, i as u64));
        let mut layer_indices = index::sample(&mut r, layers, t).into_vec();
        layer_indices.sort_unstable();
        let mut head_indices = Vec::with_capacity(t);
        let mut batch_indices = Vec::with_capacity(t);
        for _ in 0..t {
            head_indices.push(r.random_range(0..heads));
            batch_indices.push(r.random_range(0..batch));
        }
        let mut s = PathSample {
            depth: t,
            layer_indices,
            head_indices,
            batch_indices,
            normalized_residual: 0.0,
        };
        s.normalized_residual = path_residual(&path_product(store, &s)?)?;
        Ok(s)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResidualPoint {
    /// 0-based layer index.
    pub layer: usize,
    pub mean: f64,
    /// Population standard deviation over the batch.
    pub std: f64,
    /// `None` where the output matrix was zero.
    pub per_element: Vec<Option<f64>>,
}

/// Normalized row-mean residual of every layer output, with batch mean and
/// standard deviation. Zero outputs are skipped in the statistics.
pub fn layer_residual_curve(store: &AttnStore) -> Vec<LayerResidualPoint> {
    layer_residual_curve_with(Exec::default(), store)
}

pub fn layer_residual_curve_with(exec: Exec, store: &AttnStore) -> Vec<LayerResidualPoint> {
    store
        .outputs
        .iter()
        .enumerate()
        .map(|(layer, outs)| {
            let per_element = par::map_indexed(exec, outs.len(), |b| normalized_residual(&outs[b]));
            let vals: Vec<f64> = per_element.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&vals);
            LayerResidualPoint {
                layer,
                mean,
                std,
                per_element,
            }
        })
        .collect()
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Box-plot summary: quartiles by linear interpolation, whiskers at the most
/// extreme data within 1.5·IQR of the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_lo = v.iter().copied().find(|&x| x >= lo).unwrap_or(q1);
        let whisker_hi = v.iter().rev().copied().find(|&x| x <= hi).unwrap_or(q3);
        Some(Self {
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            whisker_lo,
            whisker_hi,
        })
    }
}

/// Linear-interpolation quantile of sorted data, `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    BoxStats::from_values(values).map_or(f64::NAN, |b| b.median)
}
