//! Rank decay of products of random stochastic matrices, optionally with half
//! of the factors replaced by the identity to mimic skip connections.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::normalize::{normalize, NormalizerKind, SinkhornParams};
use crate::par::{self, Exec};
use crate::residual::path_residual;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProductConfig {
    pub n: usize,
    pub max_depth: usize,
    pub samples: usize,
    pub kind: NormalizerKind,
    pub skip_sim: bool,
    pub seed: u64,
    pub sinkhorn: SinkhornParams,
}

impl RandomProductConfig {
    pub fn new(kind: NormalizerKind, skip_sim: bool, seed: u64) -> Self {
        Self {
            n: 32,
            max_depth: 24,
            samples: 100,
            kind,
            skip_sim,
            seed,
            sinkhorn: SinkhornParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProductRow {
    pub depth: usize,
    pub sample: usize,
    pub normalized_residual: f64,
}

/// How many of the `t` factors become the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    /// `⌊t/2⌋` when skip simulation is on, none otherwise.
    Half,
    /// Every factor; a test hook.
    All,
}

/// For each depth `1..=max_depth` and sample, draws `t` standard Gaussian
/// logit matrices, normalizes them, optionally swaps `⌊t/2⌋` uniformly chosen
/// slots for the identity, multiplies them in draw order (the last drawn is
/// leftmost) and records `σ₂/σ₁`. Each `(depth, sample)` pair has its own
/// generator, so results do not depend on scheduling.
pub fn random_product_experiment(cfg: &RandomProductConfig) -> Result<Vec<RandomProductRow>> {
    random_product_experiment_with(Exec::default(), cfg, Replacement::Half)
}

pub fn random_product_experiment_with(
    exec: Exec,
    cfg: &RandomProductConfig,
    replacement: Replacement,
) -> Result<Vec<RandomProductRow>> {
    if cfg.n < 2 || cfg.max_depth == 0 {
        return Err(Error::invalid("random products need n >= 2 and max_depth >= 1"));
    }
    cfg.sinkhorn.validate()?;
    let total = cfg.max_depth * cfg.samples;
    par::try_map_indexed(exec, total, |k| {
        let depth = k / cfg.samples + 1;
        let sample = k % cfg.samples;
        let mut r = rng::seeded(rng::derive2(cfg.seed, depth as u64, sample as u64));
        let mut factors = Vec::with_capacity(depth);
        for _ in 0..depth {
            let s = rng::gaussian(&mut r, cfg.n, cfg.n, 1.0);
            factors.push(normalize(&s, cfg.kind, &cfg.sinkhorn)?.p);
        }
        let replaced: Vec<usize> = match (replacement, cfg.skip_sim) {
            (Replacement::All, _) => (0..depth).collect(),
            (Replacement::Half, true) => index::sample(&mut r, depth, depth / 2).into_vec(),
            (Replacement::Half, false) => Vec::new(),
        };
        for i in replaced {
            factors[i] = Mat::identity(cfg.n);
        }
        let mut prod = factors[0].clone();
        for f in &factors[1..] {
            prod = f.matmul(&prod)?;
        }
        Ok(RandomProductRow {
            depth,
            sample,
            normalized_residual: path_residual(&prod)?,
        })
    })
}

/// Median normalized residual at each depth, index `t − 1`.
pub fn median_by_depth(rows: &[RandomProductRow], max_depth: usize) -> Vec<f64> {
    (1..=max_depth)
        .map(|t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.depth == t).map(|r| r.normalized_residual).collect();
            crate::residual::median(&v)
        })
        .collect()
}

/// Writes `kind,skip_sim,depth,sample,normalized_residual`.
pub fn write_csv(
    rows: &[RandomProductRow],
    kind: NormalizerKind,
    skip_sim: bool,
    header: bool,
    mut w: impl Write,
) -> Result<()> {
    if header {
        writeln!(w, "kind,skip_sim,depth,sample,normalized_residual")?;
    }
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.16e}",
            kind.label(),
            skip_sim,
            r.depth,
            r.sample,
            r.normalized_residual
        )?;
    }
    Ok(())
}
