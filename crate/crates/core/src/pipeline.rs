//! The experiment pipelines behind each CSV artifact. Rows come back in a
//! canonical order, so files are byte-stable for a given seed.

use std::io::Write;

use crate::attention::{Checkpoint, Setting};
use crate::bounds::{bound_trial, BoundReport, TrialSpec};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::normalize::{sinkhorn, SinkhornParams};
use crate::par::{self, Exec};
use crate::project::{cr_linearization_error, linearization_residual, sinkhorn_first_order_slope, sinkhorn_linearization_error};
use crate::residual::{layer_residual_curve_with, sample_paths_with, LayerResidualPoint, PathSample};
use crate::rng;
use crate::train::{eval_batch, export_attention};

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Evaluation batch size for attention export.
pub const EVAL_BATCH: usize = 32;

/// Sinkhorn settings used when analysing trained models.
pub const ANALYSIS_SINKHORN: SinkhornParams = SinkhornParams {
    max_iters: 50,
    tol: 1e-6,
    early_stop: true,
};

/// Path samples of a trained model at every requested depth.
pub fn paths_experiment(
    exec: Exec,
    ck: &Checkpoint,
    setting: Setting,
    depths: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<PathSample>> {
    let batch = eval_batch(ck, EVAL_BATCH)?;
    let store = export_attention(ck, &batch, setting, Some(ANALYSIS_SINKHORN))?;
    let mut out = Vec::with_capacity(depths.len() * samples);
    for &t in depths {
        out.extend(sample_paths_with(exec, &store, t, samples, rng::derive(seed, t as u64))?);
    }
    Ok(out)
}

/// Layer residual curve of a trained model on its evaluation batch.
pub fn layers_experiment(exec: Exec, ck: &Checkpoint, setting: Setting) -> Result<Vec<LayerResidualPoint>> {
    let batch = eval_batch(ck, EVAL_BATCH)?;
    let store = export_attention(ck, &batch, setting, Some(ANALYSIS_SINKHORN))?;
    Ok(layer_residual_curve_with(exec, &store))
}

/// Writes `normalizer,setting,depth,sample,normalized_residual`.
pub fn write_paths_csv(ck: &Checkpoint, setting: Setting, rows: &[PathSample], header: bool, mut w: impl Write) -> Result<()> {
    if header {
        writeln!(w, "normalizer,setting,depth,sample,normalized_residual")?;
    }
    let norm = ck.config.normalizer.label();
    let mut sample = 0;
    let mut depth = 0;
    for r in rows {
        if r.depth != depth {
            depth = r.depth;
            sample = 0;
        }
        writeln!(w, "{norm},{setting},{},{sample},{}", r.depth, fmt_f64(r.normalized_residual))?;
        sample += 1;
    }
    Ok(())
}

/// Writes `normalizer,setting,layer,batch_index,normalized_residual` with
/// 1-based layers; zero outputs are written as `nan`.
pub fn write_layers_csv(
    ck: &Checkpoint,
    setting: Setting,
    curve: &[LayerResidualPoint],
    header: bool,
    mut w: impl Write,
) -> Result<()> {
    if header {
        writeln!(w, "normalizer,setting,layer,batch_index,normalized_residual")?;
    }
    let norm = ck.config.normalizer.label();
    for pt in curve {
        for (b, v) in pt.per_element.iter().enumerate() {
            let v = v.map_or_else(|| "nan".to_string(), fmt_f64);
            writeln!(w, "{norm},{setting},{},{b},{v}", pt.layer + 1)?;
        }
    }
    Ok(())
}

/// `trials` seeded bound trials; trial `i` uses seed `derive(seed, i)`.
pub fn bounds_experiment(exec: Exec, spec: &TrialSpec, trials: usize, seed: u64) -> Result<Vec<(u64, BoundReport)>> {
    par::try_map_indexed(exec, trials, |i| {
        let s = rng::derive(seed, i as u64);
        Ok::<_, Error>((s, bound_trial(spec, s)?))
    })
}

/// Writes `variant,seed,n,d_qk,H,L,res_in,lhs,rhs,satisfied`.
pub fn write_bounds_csv(spec: &TrialSpec, rows: &[(u64, BoundReport)], header: bool, mut w: impl Write) -> Result<()> {
    if header {
        writeln!(w, "variant,seed,n,d_qk,H,L,res_in,lhs,rhs,satisfied")?;
    }
    for (seed, r) in rows {
        writeln!(
            w,
            "{},{seed},{},{},{},{},{},{},{},{}",
            spec.variant,
            r.n,
            r.d_qk,
            r.heads,
            r.layers,
            fmt_f64(r.res_in),
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            r.satisfied
        )?;
    }
    Ok(())
}

/// One row of the first-order expansion check.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxRow {
    pub variant: &'static str,
    pub t: f64,
    pub error: f64,
}

/// Sinkhorn tolerance for the expansion check; tight enough that the
/// iteration error stays far below the expansion error at the smallest `t`.
pub const APPROX_SINKHORN: SinkhornParams = SinkhornParams {
    max_iters: 5000,
    tol: 1e-15,
    early_stop: true,
};

/// Expansion errors around the uniform matrix for a Gaussian `Y`:
/// `sinkhorn` uses slope `t/n²`, `sinkhorn_t_over_n` slope `t/n`, and
/// `cr` is column softmax after row softmax with slope `t/n²`.
pub fn approx_experiment(n: usize, t_grid: &[f64], seed: u64) -> Result<Vec<ApproxRow>> {
    if n < 2 {
        return Err(Error::invalid("approx check needs n >= 2"));
    }
    let y: Mat = rng::gaussian(&mut rng::seeded(seed), n, n, 1.0);
    let mut rows = Vec::new();
    for &t in t_grid {
        let sk = sinkhorn_linearization_error(&y, t, &APPROX_SINKHORN)?;
        if !sk.converged {
            log::warn!("approx-check: Sinkhorn did not converge at t={t}");
        }
        rows.push(ApproxRow {
            variant: "sinkhorn",
            t,
            error: sk.error,
        });
        let p = sinkhorn(&y.scale(t), &APPROX_SINKHORN)?.p;
        rows.push(ApproxRow {
            variant: "sinkhorn_t_over_n",
            t,
            error: linearization_residual(&p, &y, sinkhorn_first_order_slope(n, t))?,
        });
        rows.push(ApproxRow {
            variant: "cr",
            t,
            error: cr_linearization_error(&y, t)?,
        });
    }
    Ok(rows)
}

/// Writes `variant,t,error,error_over_t`.
pub fn write_approx_csv(rows: &[ApproxRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "variant,t,error,error_over_t")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.variant, fmt_f64(r.t), fmt_f64(r.error), fmt_f64(r.error / r.t))?;
    }
    Ok(())
}
