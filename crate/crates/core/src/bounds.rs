//! Numerical checks of the residual decay bounds for Sinkhorn self-attention
//! without biases, skip connections, feed-forward layers or norms.
//!
//! Every bound has the form
//!
//! ```text
//! ‖res(SAN(X))‖₂ ≤ (λβH / √(n³ d_qk))^((3^L − 1)/2) · ‖res(X)‖₂^(3^L)
//! ```
//!
//! with `λ = 1`. The left side is evaluated by propagating residuals: with a
//! doubly stochastic `P = (1/n)11ᵀ + D`, `res(P X W) = D res(X) W`, and the
//! logits of the next layer only matter up to row and column shifts, so they
//! can be formed from the residual alone. `D` comes from
//! [`sinkhorn_deviation`], which keeps it accurate far below the rounding
//! level of `P`. The plain forward-pass value is reported alongside.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{san_forward, HeadWeights, LayerWeights, NetConfig, Toggles};
use crate::error::{Error, Result};
use crate::mat::{norm_1, norm_inf, spectral_norm, Mat};
use crate::normalize::{sinkhorn_deviation, NormalizerKind, SinkhornParams};
use crate::residual::residual;
use crate::rng;

/// Sinkhorn settings for bound and scaling measurements.
pub const TIGHT_SINKHORN: SinkhornParams = SinkhornParams {
    max_iters: 2000,
    tol: 1e-14,
    early_stop: true,
};

pub const LAMBDA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// One head, one layer.
    Single,
    /// One head, `L` layers.
    Shml,
    /// `H` heads, one layer.
    Mhsl,
    /// `H` heads, `L` layers.
    Mhml,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 4] = [BoundVariant::Single, BoundVariant::Shml, BoundVariant::Mhsl, BoundVariant::Mhml];

    pub fn label(self) -> &'static str {
        match self {
            BoundVariant::Single => "single",
            BoundVariant::Shml => "shml",
            BoundVariant::Mhsl => "mhsl",
            BoundVariant::Mhml => "mhml",
        }
    }

    /// Whether `(heads, layers)` fits this variant.
    pub fn admits(self, heads: usize, layers: usize) -> bool {
        match self {
            BoundVariant::Single => heads == 1 && layers == 1,
            BoundVariant::Shml => heads == 1,
            BoundVariant::Mhsl => layers == 1,
            BoundVariant::Mhml => true,
        }
    }
}

impl fmt::Display for BoundVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BoundVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoundVariant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown bound variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Residual norm of the output, from residual propagation.
    pub lhs: f64,
    /// Residual norm of the output of the plain forward pass.
    pub lhs_direct: f64,
    /// `+∞` when the formula overflows.
    pub rhs: f64,
    pub lambda_used: f64,
    pub beta: f64,
    pub res_in: f64,
    pub n: usize,
    pub d_qk: usize,
    pub heads: usize,
    pub layers: usize,
    pub satisfied: bool,
    /// Whether every Sinkhorn call reached its tolerance.
    pub converged: bool,
}

/// `(λβH/√(n³d_qk))^((3^L−1)/2) · r^(3^L)`, evaluated in logs; `+∞` if the
/// exponent or the result overflows.
pub fn bound_rhs(lambda: f64, beta: f64, heads: usize, n: usize, d_qk: usize, layers: usize, res_in: f64) -> f64 {
    let p3 = 3f64.powi(layers.min(i32::MAX as usize) as i32);
    if !p3.is_finite() {
        return f64::INFINITY;
    }
    let coeff = lambda * beta * heads as f64 / ((n as f64).powi(3) * d_qk as f64).sqrt();
    let e = (p3 - 1.0) / 2.0;
    if res_in == 0.0 || coeff == 0.0 {
        return 0.0;
    }
    let log = e * coeff.ln() + p3 * res_in.ln();
    if log > f64::MAX.ln() {
        f64::INFINITY
    } else {
        log.exp()
    }
}

fn require_zero_bias(h: &HeadWeights) -> Result<()> {
    if h.has_zero_bias() {
        Ok(())
    } else {
        Err(Error::invalid("bounds are stated for heads without biases"))
    }
}

/// `res` of one bias-free Sinkhorn head applied to an input with residual `r`,
/// mapped through `w` (`d×d'`). Returns `D r w` and the convergence flag.
fn propagate_head(r: &Mat, h: &HeadWeights, w: &Mat, params: &SinkhornParams) -> Result<(Mat, bool)> {
    let logits = r
        .matmul(&h.w_q)?
        .matmul(&r.matmul(&h.w_k)?.transpose())?
        .scale((h.d_qk() as f64).sqrt().recip());
    let (dev, converged) = sinkhorn_deviation(&logits, params)?;
    Ok((dev.matmul(r)?.matmul(w)?, converged))
}

/// `‖res(SA_h(X))‖₂` for a bias-free Sinkhorn head via residual propagation.
pub fn head_output_residual(x: &Mat, h: &HeadWeights, params: &SinkhornParams) -> Result<(f64, bool)> {
    require_zero_bias(h)?;
    let (out, converged) = propagate_head(&residual(x), h, &h.w_v, params)?;
    Ok((spectral_norm(&residual(&out)), converged))
}

/// Single head, single layer: `β = ‖W_Q W_Kᵀ‖₂ ‖W_V‖₂`.
pub fn bound_single(x: &Mat, h: &HeadWeights, params: &SinkhornParams) -> Result<BoundReport> {
    require_zero_bias(h)?;
    let n = x.rows();
    if x.cols() != h.d() {
        return Err(Error::ShapeMismatch {
            op: "bound_single",
            left: x.shape(),
            right: h.w_q.shape(),
        });
    }
    let beta = spectral_norm(&h.w_qk()?) * spectral_norm(&h.w_v);
    let res_in = spectral_norm(&residual(x));
    let (lhs, converged) = head_output_residual(x, h, params)?;

    let logits = crate::attention::attention_logits(x, h, h.d_qk())?;
    let p = crate::normalize::sinkhorn(&logits, params)?.p;
    let lhs_direct = spectral_norm(&residual(&p.matmul(x)?.matmul(&h.w_v)?));

    let rhs = bound_rhs(LAMBDA, beta, 1, n, h.d_qk(), 1, res_in);
    Ok(BoundReport {
        lhs,
        lhs_direct,
        rhs,
        lambda_used: LAMBDA,
        beta,
        res_in,
        n,
        d_qk: h.d_qk(),
        heads: 1,
        layers: 1,
        satisfied: lhs <= rhs,
        converged,
    })
}

/// `max_{ℓ,h} ‖W_Q W_Kᵀ‖₂ ‖W_{V,h} W_{O,h}‖₂`.
pub fn network_beta(net: &[LayerWeights]) -> Result<f64> {
    let mut beta = 0.0f64;
    for lw in net {
        for (h, head) in lw.heads.iter().enumerate() {
            beta = beta.max(spectral_norm(&head.w_qk()?) * spectral_norm(&lw.head_value_output(h)?));
        }
    }
    Ok(beta)
}

/// Pure Sinkhorn network bound for the given variant.
pub fn bound_network(
    x: &Mat,
    net: &[LayerWeights],
    cfg: &NetConfig,
    variant: BoundVariant,
) -> Result<BoundReport> {
    if cfg.toggles != Toggles::PURE || cfg.normalizer != NormalizerKind::Sinkhorn {
        return Err(Error::invalid("bounds need a pure Sinkhorn network (no skip, FF or norms)"));
    }
    if !variant.admits(cfg.heads, cfg.layers) {
        return Err(Error::invalid(format!(
            "variant {variant} does not admit H={}, L={}",
            cfg.heads, cfg.layers
        )));
    }
    for lw in net {
        for h in &lw.heads {
            require_zero_bias(h)?;
        }
    }
    let store = san_forward(std::slice::from_ref(x), net, cfg)?;
    let lhs_direct = spectral_norm(&residual(&store.final_outputs()[0]));

    let res_in = spectral_norm(&residual(x));
    let mut r = residual(x);
    let mut converged = true;
    for lw in net {
        let mut next = Mat::zeros(r.rows(), cfg.d);
        for (h, head) in lw.heads.iter().enumerate() {
            let (term, ok) = propagate_head(&r, head, &lw.head_value_output(h)?, &cfg.sinkhorn)?;
            converged &= ok;
            next = next.add(&term)?;
        }
        r = residual(&next);
    }
    let lhs = spectral_norm(&r);
    let beta = network_beta(net)?;
    let rhs = bound_rhs(LAMBDA, beta, cfg.heads, cfg.n, cfg.d_qk, cfg.layers, res_in);
    Ok(BoundReport {
        lhs,
        lhs_direct,
        rhs,
        lambda_used: LAMBDA,
        beta,
        res_in,
        n: cfg.n,
        d_qk: cfg.d_qk,
        heads: cfg.heads,
        layers: cfg.layers,
        satisfied: rhs.is_infinite() || lhs <= rhs,
        converged,
    })
}

/// Input `1xᵀ + R` with Gaussian `x` and a Gaussian residual rescaled so
/// that `‖R‖₂ = res_scale`.
pub fn small_residual_input(rng: &mut impl Rng, n: usize, d: usize, res_scale: f64) -> Mat {
    let x = rng::gaussian(rng, 1, d, 1.0);
    let r = residual(&rng::gaussian(rng, n, d, 1.0));
    let r = r.scale(res_scale / spectral_norm(&r));
    Mat::from_fn(n, d, |i, j| x[(0, j)] + r[(i, j)])
}

/// Parameters of one seeded bound trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialSpec {
    pub variant: BoundVariant,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub res_scale: f64,
}

impl TrialSpec {
    /// `n = 8`, `d = 4`, residual scale 0.05.
    pub fn standard(variant: BoundVariant, heads: usize, layers: usize) -> Self {
        Self {
            variant,
            n: 8,
            d: 4,
            heads,
            layers,
            res_scale: 0.05,
        }
    }
}

/// Weights `N(0, 1/d)` and a small-residual input, all drawn from `seed`.
pub fn bound_trial(spec: &TrialSpec, seed: u64) -> Result<BoundReport> {
    let mut cfg = NetConfig::new(spec.layers, spec.heads, spec.n, spec.d, spec.d, NormalizerKind::Sinkhorn, Toggles::PURE)?;
    cfg.sinkhorn = TIGHT_SINKHORN;
    let mut r = rng::seeded(seed);
    let std = cfg.default_init_std();
    let x = small_residual_input(&mut r, spec.n, spec.d, spec.res_scale);
    match spec.variant {
        BoundVariant::Single => {
            if spec.heads != 1 || spec.layers != 1 {
                return Err(Error::invalid("the single variant needs H = L = 1"));
            }
            let h = HeadWeights::random(&mut r, spec.d, spec.d, spec.d, std);
            bound_single(&x, &h, &TIGHT_SINKHORN)
        }
        v => {
            let net = cfg.random_layers(&mut r, std);
            bound_network(&x, &net, &cfg, v)
        }
    }
}

/// Least-squares log-log slope of the head output residual against the input
/// residual scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// `None` when fewer than two scales survive (including `W_QK = 0`).
    pub slope: Option<f64>,
    pub scales: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Scales whose output residual fell below the underflow floor.
    pub dropped: Vec<f64>,
}

impl ScalingFit {
    pub fn is_degenerate(&self) -> bool {
        self.slope.is_none()
    }
}

pub const UNDERFLOW_FLOOR: f64 = 1e-14;

/// Fits `log‖res(SA_h(1xᵀ + ε·res(X)))‖₂` against `log ε`. The Sinkhorn head is
/// evaluated by residual propagation; the softmax head directly.
pub fn cubic_scaling_exponent(x: &Mat, h: &HeadWeights, scales: &[f64], kind: NormalizerKind) -> Result<ScalingFit> {
    if scales.len() < 3 {
        return Err(Error::invalid("need at least three scales"));
    }
    if scales.windows(2).any(|w| !(w[1] < w[0])) || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("scales must be positive and strictly decreasing"));
    }
    require_zero_bias(h)?;
    let mean = x.col_means();
    let r = residual(x);
    let mut fit = ScalingFit {
        slope: None,
        scales: Vec::new(),
        residuals: Vec::new(),
        dropped: Vec::new(),
    };
    for &eps in scales {
        let xe = Mat::from_fn(x.rows(), x.cols(), |i, j| mean[j] + eps * r[(i, j)]);
        let res = match kind {
            NormalizerKind::Sinkhorn => head_output_residual(&xe, h, &TIGHT_SINKHORN)?.0,
            NormalizerKind::SoftmaxRows => {
                let out = crate::attention::sa_head(&xe, h, kind, &TIGHT_SINKHORN)?.out;
                spectral_norm(&residual(&out))
            }
        };
        if res < UNDERFLOW_FLOOR {
            fit.dropped.push(eps);
        } else {
            fit.scales.push(eps);
            fit.residuals.push(res);
        }
    }
    if fit.scales.len() >= 2 {
        let xs: Vec<f64> = fit.scales.iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = fit.residuals.iter().map(|s| s.ln()).collect();
        fit.slope = Some(least_squares_slope(&xs, &ys));
    }
    Ok(fit)
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormComparison {
    pub l2: f64,
    pub l1inf: f64,
    pub holds: bool,
}

/// `‖M‖₂` against `√(‖M‖₁‖M‖∞)`, with `1e-12` relative slack.
pub fn l2_vs_l1inf(m: &Mat) -> NormComparison {
    let l2 = spectral_norm(m);
    let l1inf = (norm_1(m) * norm_inf(m)).sqrt();
    NormComparison {
        l2,
        l1inf,
        holds: l2 <= l1inf + 1e-12 * l1inf.max(1.0),
    }
}
