//! The invariant and acceptance suite behind `sinkrank verify`.
//!
//! Each check returns a [`CheckResult`] with the measured quantities in its
//! detail string. Gated checks decide the exit status; ungated ones are
//! reported only.

use std::time::Instant;

use rand::Rng;

use crate::attention::{Checkpoint, Setting};
use crate::autodiff::{NodeId, Tape};
use crate::bounds::{cubic_scaling_exponent, l2_vs_l1inf, small_residual_input, BoundVariant, TrialSpec};
use crate::error::Result;
use crate::mat::{frobenius_norm, Mat};
use crate::normalize::{sinkhorn, stochasticity_deviation, NormalizerKind, SinkhornParams};
use crate::par::Exec;
use crate::pipeline::{self, approx_experiment, bounds_experiment, layers_experiment, paths_experiment};
use crate::project::{project_tds, tds_check};
use crate::randomprod::{median_by_depth, random_product_experiment_with, RandomProductConfig, Replacement};
use crate::residual::median;
use crate::rng;
use crate::train::{self, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub gated: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let status = match (self.passed, self.gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        format!("{status} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

fn timed(name: &'static str, gated: bool, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        gated,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed || !r.gated)
}

/// 100 Gaussian 32×32 logit matrices: deviation ≤ 1e-6 within 50 sweeps, < 5 s.
pub fn check_sinkhorn_correctness(seed: u64) -> CheckResult {
    timed("sinkhorn_correctness", true, || {
        let start = Instant::now();
        let mut r = rng::seeded(rng::derive(seed, 101));
        let params = SinkhornParams::default();
        let (mut worst, mut max_iters) = (0.0f64, 0);
        for _ in 0..100 {
            let out = sinkhorn(&rng::gaussian(&mut r, 32, 32, 1.0), &params)?;
            let (rd, cd) = stochasticity_deviation(&out.p);
            worst = worst.max(rd.max(cd));
            max_iters = max_iters.max(out.iterations);
        }
        let secs = start.elapsed().as_secs_f64();
        Ok((
            worst <= 1e-6 && max_iters <= 50 && secs < 5.0,
            format!("max deviation {worst:.2e}, max sweeps {max_iters}, {secs:.3}s"),
        ))
    })
}

/// `‖sinkhorn(S + u1ᵀ + 1vᵀ) − sinkhorn(S)‖_F ≤ 1e-8` on 100 triples, with a
/// tolerance tight enough that both runs reach the common limit.
pub fn check_shift_invariance(seed: u64) -> CheckResult {
    timed("shift_invariance", true, || {
        let mut r = rng::seeded(rng::derive(seed, 102));
        let params = SinkhornParams::new(1000, 1e-13)?;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = r.random_range(2..=32);
            let s = rng::gaussian(&mut r, n, n, 1.0);
            let u = rng::gaussian(&mut r, n, 1, 1.0);
            let v = rng::gaussian(&mut r, 1, n, 1.0);
            let shifted = Mat::from_fn(n, n, |i, j| s[(i, j)] + u[(i, 0)] + v[(0, j)]);
            let a = sinkhorn(&s, &params)?.p;
            let b = sinkhorn(&shifted, &params)?.p;
            worst = worst.max(frobenius_norm(&a.sub(&b)?));
        }
        Ok((worst <= 1e-8, format!("max Frobenius difference {worst:.2e}")))
    })
}

/// `error(t)/t` must shrink by ≥ 5 per decade from `t = 1e-1` to `1e-3`, for
/// Sinkhorn with slope `t/n²` and for C∘R. The Sinkhorn line with slope `t/n`
/// is reported in the detail.
pub fn check_linearization(seed: u64) -> CheckResult {
    timed("linearization", true, || {
        let rows = approx_experiment(16, &[1e-1, 1e-2, 1e-3], rng::derive(seed, 103))?;
        let drops = |variant: &str| -> Vec<f64> {
            let r: Vec<f64> = rows.iter().filter(|x| x.variant == variant).map(|x| x.error / x.t).collect();
            vec![r[0] / r[1], r[1] / r[2]]
        };
        let (sk, cr, corrected) = (drops("sinkhorn"), drops("cr"), drops("sinkhorn_t_over_n"));
        let ok = |d: &[f64]| d.iter().all(|&x| x >= 5.0);
        Ok((
            ok(&sk) && ok(&cr),
            format!(
                "decade drop factors: sinkhorn(t/n^2) {:.3}, {:.3} [{}]; cr {:.2}, {:.2} [{}]; sinkhorn(t/n) {:.2}, {:.2}",
                sk[0],
                sk[1],
                if ok(&sk) { "ok" } else { "not o(t)" },
                cr[0],
                cr[1],
                if ok(&cr) { "ok" } else { "not o(t)" },
                corrected[0],
                corrected[1]
            ),
        ))
    })
}

/// Idempotence, zero sums, self-adjointness, contraction and the Pythagoras
/// identity of `Q` on 100 random square matrices up to 64×64.
pub fn check_projector_suite(seed: u64) -> CheckResult {
    timed("projector_suite", true, || {
        let mut r = rng::seeded(rng::derive(seed, 104));
        let mut worst = [0.0f64; 5];
        for _ in 0..100 {
            let n = r.random_range(1..=64);
            let a = rng::gaussian(&mut r, n, n, 1.0);
            let b = rng::gaussian(&mut r, n, n, 1.0);
            let qa = project_tds(&a)?;
            let qb = project_tds(&b)?;
            let tds = tds_check(&qa);
            let na = frobenius_norm(&a);
            let nqa = frobenius_norm(&qa);
            let rest = frobenius_norm(&a.sub(&qa)?);
            let errs = [
                project_tds(&qa)?.max_abs_diff(&qa),
                tds.row_zero_dev.max(tds.col_zero_dev),
                (qa.frobenius_dot(&b)? - a.frobenius_dot(&qb)?).abs(),
                (nqa - na).max(0.0),
                (na * na - nqa * nqa - rest * rest).abs(),
            ];
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        Ok((
            worst.iter().all(|&e| e <= 1e-10),
            format!(
                "idempotence {:.1e}, zero sums {:.1e}, symmetry {:.1e}, contraction {:.1e}, pythagoras {:.1e}",
                worst[0], worst[1], worst[2], worst[3], worst[4]
            ),
        ))
    })
}

/// Log-log slope of the head output residual in `{1e-1, 1e-2, 1e-3}` is
/// `3 ± 0.1` for 20 seeds (Sinkhorn). Softmax slopes go in the detail.
pub fn check_cubic_rate(seed: u64) -> CheckResult {
    timed("cubic_rate", true, || {
        let scales = [1e-1, 1e-2, 1e-3];
        let (mut sk, mut sm) = (Vec::new(), Vec::new());
        for i in 0..20 {
            let mut r = rng::seeded(rng::derive2(seed, 105, i));
            let h = crate::attention::HeadWeights::random(&mut r, 4, 4, 4, 0.5);
            let x = small_residual_input(&mut r, 8, 4, 1.0);
            sk.push(cubic_scaling_exponent(&x, &h, &scales, NormalizerKind::Sinkhorn)?.slope.unwrap_or(f64::NAN));
            sm.push(cubic_scaling_exponent(&x, &h, &scales, NormalizerKind::SoftmaxRows)?.slope.unwrap_or(f64::NAN));
        }
        let range = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        let (lo, hi) = range(&sk);
        let (slo, shi) = range(&sm);
        Ok((
            sk.iter().all(|s| (s - 3.0).abs() <= 0.1),
            format!("sinkhorn slopes in [{lo:.4}, {hi:.4}]; softmax slopes in [{slo:.4}, {shi:.4}] (not gated)"),
        ))
    })
}

/// The `(variant, H, L)` grid of the bound checks.
pub const BOUND_GRID: [(BoundVariant, usize, usize); 6] = [
    (BoundVariant::Single, 1, 1),
    (BoundVariant::Shml, 1, 2),
    (BoundVariant::Shml, 1, 3),
    (BoundVariant::Mhsl, 2, 1),
    (BoundVariant::Mhml, 2, 2),
    (BoundVariant::Mhml, 2, 3),
];

/// Each bound satisfied in ≥ 99 of 100 trials at residual scale 0.05.
pub fn check_bounds(exec: Exec, seed: u64) -> CheckResult {
    timed("bound_satisfaction", true, || {
        let mut parts = Vec::new();
        let mut ok = true;
        for (v, h, l) in BOUND_GRID {
            let spec = TrialSpec::standard(v, h, l);
            let rows = bounds_experiment(exec, &spec, 100, rng::derive2(seed, 106, (h * 10 + l) as u64))?;
            let sat = rows.iter().filter(|r| r.1.satisfied).count();
            let worst = rows.iter().map(|r| r.1.lhs / r.1.rhs).fold(0.0f64, f64::max);
            ok &= sat >= 99;
            parts.push(format!("{v}(H={h},L={l}) {sat}/100 max lhs/rhs {worst:.2}"));
        }
        Ok((ok, parts.join("; ")))
    })
}

/// `‖M‖₂ ≤ √(‖M‖₁‖M‖∞)` for 1000 Gaussian matrices.
pub fn check_norm_relation(seed: u64) -> CheckResult {
    timed("l2_vs_l1inf", true, || {
        let mut r = rng::seeded(rng::derive(seed, 107));
        let mut violations = 0;
        let mut max_ratio = 0.0f64;
        for _ in 0..1000 {
            let c = l2_vs_l1inf(&rng::gaussian(&mut r, 16, 16, 1.0));
            violations += usize::from(!c.holds);
            max_ratio = max_ratio.max(c.l2 / c.l1inf);
        }
        Ok((violations == 0, format!("{violations} violations, max l2/l1inf {max_ratio:.3}")))
    })
}

/// Medians of the four random-product runs at `n = 32`, depths 1..=24.
#[derive(Clone, Debug)]
pub struct RandomProductMedians {
    pub softmax: Vec<f64>,
    pub sinkhorn: Vec<f64>,
    pub softmax_skip: Vec<f64>,
    pub sinkhorn_skip: Vec<f64>,
    pub seconds: f64,
}

pub fn random_product_medians(exec: Exec, seed: u64) -> Result<RandomProductMedians> {
    let start = Instant::now();
    let run = |kind, skip| -> Result<Vec<f64>> {
        let cfg = RandomProductConfig::new(kind, skip, seed);
        Ok(median_by_depth(&random_product_experiment_with(exec, &cfg, Replacement::Half)?, cfg.max_depth))
    };
    Ok(RandomProductMedians {
        softmax: run(NormalizerKind::SoftmaxRows, false)?,
        sinkhorn: run(NormalizerKind::Sinkhorn, false)?,
        softmax_skip: run(NormalizerKind::SoftmaxRows, true)?,
        sinkhorn_skip: run(NormalizerKind::Sinkhorn, true)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Softmax and Sinkhorn medians within 20% at every depth; skip simulation at
/// least as slow to decay from depth 4; under two minutes.
pub fn check_random_products(m: &RandomProductMedians) -> CheckResult {
    let mut r = timed("random_products", true, || {
        let rel: Vec<f64> = m
            .softmax
            .iter()
            .zip(&m.sinkhorn)
            .map(|(a, b)| (a - b).abs() / a.max(*b))
            .collect();
        let bad: Vec<usize> = (0..rel.len()).filter(|&i| rel[i] > 0.2).map(|i| i + 1).collect();
        let agree = bad.is_empty();
        let skip_ok = (3..m.softmax.len())
            .all(|i| m.softmax_skip[i] >= m.softmax[i] && m.sinkhorn_skip[i] >= m.sinkhorn[i]);
        let fast = m.seconds < 120.0;
        let ratio = |t: usize| m.sinkhorn[t - 1] / m.softmax[t - 1];
        Ok((
            agree && skip_ok && fast,
            format!(
                "agreement {} (depths over 20%: {:?}; sinkhorn/softmax median ratio at t=1,6,12,24: {:.2}, {:.2}, {:.2}, {:.2}); skip slower from t=4: {skip_ok}; {:.1}s",
                if agree { "ok" } else { "fails" },
                bad,
                ratio(1),
                ratio(6),
                ratio(12),
                ratio(24),
                m.seconds
            ),
        ))
    });
    r.seconds += m.seconds;
    r
}

/// Trained checkpoints for each seed, Softmax first.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub seeds: Vec<u64>,
    pub softmax: Vec<Checkpoint>,
    pub sinkhorn: Vec<Checkpoint>,
    /// `(final train accuracy, seconds)`, same order as the checkpoints.
    pub softmax_stats: Vec<(f64, f64)>,
    pub sinkhorn_stats: Vec<(f64, f64)>,
}

pub fn train_models(exec: Exec, seeds: &[u64]) -> Result<TrainedModels> {
    let mut out = TrainedModels {
        seeds: seeds.to_vec(),
        softmax: Vec::new(),
        sinkhorn: Vec::new(),
        softmax_stats: Vec::new(),
        sinkhorn_stats: Vec::new(),
    };
    for &seed in seeds {
        for kind in NormalizerKind::ALL {
            let start = Instant::now();
            let cfg = TrainConfig {
                normalizer: kind,
                seed,
                ..TrainConfig::default()
            };
            let res = train::train_with(exec, &cfg)?;
            let stats = (res.final_train_accuracy, start.elapsed().as_secs_f64());
            match kind {
                NormalizerKind::SoftmaxRows => {
                    out.softmax.push(res.checkpoint);
                    out.softmax_stats.push(stats);
                }
                NormalizerKind::Sinkhorn => {
                    out.sinkhorn.push(res.checkpoint);
                    out.sinkhorn_stats.push(stats);
                }
            }
        }
    }
    Ok(out)
}

const PATH_SAMPLES: usize = 100;

fn pooled_path_median(exec: Exec, cks: &[Checkpoint], setting: Setting, depth: usize, seed: u64) -> Result<f64> {
    let mut vals = Vec::new();
    for ck in cks {
        let rows = paths_experiment(exec, ck, setting, &[depth], PATH_SAMPLES, seed)?;
        vals.extend(rows.iter().map(|r| r.normalized_residual));
    }
    Ok(median(&vals))
}

/// Both models reach 0.9 train accuracy within 15 minutes, and the Sinkhorn
/// models' median path residual, pooled over seeds, exceeds Softmax's at
/// depths `L/2` and `L` in the `san` and `san_skip` settings.
pub fn check_trained_ordering(exec: Exec, models: &TrainedModels, seed: u64) -> CheckResult {
    timed("trained_rank_ordering", true, || {
        let trained = models
            .softmax_stats
            .iter()
            .chain(&models.sinkhorn_stats)
            .all(|&(acc, secs)| acc >= 0.9 && secs <= 900.0);
        let layers = models.sinkhorn[0].config.layers;
        let mut parts = vec![format!(
            "train acc/s softmax {:?}, sinkhorn {:?}",
            fmt_stats(&models.softmax_stats),
            fmt_stats(&models.sinkhorn_stats)
        )];
        let mut ordered = true;
        for setting in [Setting::San, Setting::SanSkip] {
            for depth in [layers / 2, layers] {
                let sm = pooled_path_median(exec, &models.softmax, setting, depth, seed)?;
                let sk = pooled_path_median(exec, &models.sinkhorn, setting, depth, seed)?;
                ordered &= sk > sm;
                parts.push(format!("{setting} t={depth}: sinkhorn {sk:.3e} vs softmax {sm:.3e}"));
            }
        }
        Ok((trained && ordered, parts.join("; ")))
    })
}

fn fmt_stats(s: &[(f64, f64)]) -> Vec<String> {
    s.iter().map(|(a, t)| format!("{a:.3}/{t:.0}")).collect()
}

/// Final-layer mean residual with skip connections strictly above the pure
/// network's, for every trained model.
pub fn check_skip_effect(exec: Exec, models: &TrainedModels) -> CheckResult {
    timed("skip_connection_effect", true, || {
        let mut ok = true;
        let mut parts = Vec::new();
        for (label, cks) in [("softmax", &models.softmax), ("sinkhorn", &models.sinkhorn)] {
            for ck in cks {
                let pure = layers_experiment(exec, ck, Setting::San)?;
                let skip = layers_experiment(exec, ck, Setting::SanSkip)?;
                let (p, s) = (pure.last().map_or(f64::NAN, |x| x.mean), skip.last().map_or(f64::NAN, |x| x.mean));
                ok &= s > p;
                parts.push(format!("{label} seed {}: {s:.3e} vs {p:.3e}", ck.seed.unwrap_or(0)));
            }
        }
        Ok((ok, parts.join("; ")))
    })
}

/// Median random Sinkhorn product residual at depth 6 against the trained
/// Sinkhorn models' depth-6 paths in the full setting.
pub fn check_random_vs_trained(exec: Exec, m: &RandomProductMedians, models: &TrainedModels, seed: u64) -> CheckResult {
    timed("random_vs_trained_decay", false, || {
        let trained = pooled_path_median(exec, &models.sinkhorn, Setting::Transformer, 6, seed)?;
        let random = m.sinkhorn[5];
        Ok((random >= trained, format!("random {random:.3e} vs trained {trained:.3e} at t=6")))
    })
}

/// Central-difference gradient check, `h = 1e-5`. Returns the largest
/// relative error `‖analytic − fd‖∞ / max(‖fd‖∞, 1e-6)` over the inputs.
pub fn finite_difference_error(inputs: &[Mat], build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let eval = |vals: &[Mat]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &ids)?;
        Ok((t, ids, out))
    };
    let (tape, ids, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[k], x.shape());
        let mut fd = Mat::zeros(x.rows(), x.cols());
        for e in 0..x.as_slice().len() {
            let mut plus = inputs.to_vec();
            plus[k].as_mut_slice()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].as_mut_slice()[e] -= h;
            let (tp, _, op) = eval(&plus)?;
            let (tm, _, om) = eval(&minus)?;
            fd.as_mut_slice()[e] = (tp.value(op)[(0, 0)] - tm.value(om)[(0, 0)]) / (2.0 * h);
        }
        worst = worst.max(analytic.max_abs_diff(&fd) / fd.max_abs().max(1e-6));
    }
    Ok(worst)
}

fn weighted_sum(t: &mut Tape, x: NodeId, w: &Mat) -> Result<NodeId> {
    let w = t.leaf(w.clone());
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

type Primitive = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Every primitive with its random input shapes.
fn primitives() -> Vec<(&'static str, Vec<(usize, usize)>, Primitive)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, x| t.matmul(x[0], x[1])),
        ("add", vec![(3, 4), (3, 4)], |t, x| t.add(x[0], x[1])),
        ("mul", vec![(3, 4), (3, 4)], |t, x| t.mul(x[0], x[1])),
        ("add_row", vec![(3, 4), (1, 4)], |t, x| t.add_row(x[0], x[1])),
        ("scale", vec![(3, 4)], |t, x| Ok(t.scale(x[0], 0.7))),
        ("transpose", vec![(3, 4)], |t, x| Ok(t.transpose(x[0]))),
        ("relu", vec![(3, 4)], |t, x| Ok(t.relu(x[0]))),
        ("exp", vec![(3, 4)], |t, x| Ok(t.exp(x[0]))),
        ("row_softmax", vec![(4, 5)], |t, x| Ok(t.row_softmax(x[0]))),
        ("row_log_softmax", vec![(4, 5)], |t, x| Ok(t.row_log_softmax(x[0]))),
        ("col_log_softmax", vec![(4, 5)], |t, x| Ok(t.col_log_softmax(x[0]))),
        ("sinkhorn_unrolled", vec![(5, 5)], |t, x| t.sinkhorn_unrolled(x[0], 20)),
        ("layer_norm", vec![(3, 6), (1, 6), (1, 6)], |t, x| t.layer_norm(x[0], x[1], x[2])),
        ("mean_rows", vec![(4, 3)], |t, x| Ok(t.mean_rows(x[0]))),
        ("max_pool_rows", vec![(4, 3)], |t, x| t.max_pool_rows(x[0])),
        ("embedding_lookup", vec![(5, 3)], |t, x| t.embedding(x[0], &[4, 0, 4, 2])),
        ("concat_cols", vec![(3, 2), (3, 3)], |t, x| t.concat_cols(&[x[0], x[1]])),
        ("sum", vec![(3, 4)], |t, x| Ok(t.sum(x[0]))),
    ]
}

/// Every primitive and the full model loss (2 layers, `n = 6`, `d = 8`, both
/// normalizers) against central differences over 10 seeds, plus the softmax
/// Jacobian at zero.
pub fn check_gradients(seed: u64) -> CheckResult {
    timed("gradient_checks", true, || {
        let mut worst_name = "";
        let mut worst = 0.0f64;
        for (name, shapes, op) in primitives() {
            for s in 0..10u64 {
                let mut r = rng::seeded(rng::derive2(seed, 108, s));
                let inputs: Vec<Mat> = shapes.iter().map(|&(a, b)| rng::gaussian(&mut r, a, b, 1.0)).collect();
                let probe = {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
                    let out = op(&mut t, &ids)?;
                    t.value(out).shape()
                };
                let w = rng::gaussian(&mut r, probe.0, probe.1, 1.0);
                let err = finite_difference_error(&inputs, &|t, ids| {
                    let y = op(t, ids)?;
                    weighted_sum(t, y, &w)
                })?;
                if err > worst {
                    worst = err;
                    worst_name = name;
                }
            }
        }
        for s in 0..10u64 {
            let mut r = rng::seeded(rng::derive2(seed, 109, s));
            let logits = rng::gaussian(&mut r, 1, 4, 1.0);
            let label = r.random_range(0..4);
            let err = finite_difference_error(std::slice::from_ref(&logits), &|t, ids| t.cross_entropy_logits(ids[0], label))?;
            if err > worst {
                worst = err;
                worst_name = "cross_entropy_logits";
            }
        }
        let mut model_worst = 0.0f64;
        for kind in NormalizerKind::ALL {
            for s in 0..10u64 {
                model_worst = model_worst.max(model_gradient_error(kind, rng::derive2(seed, 110, s))?);
            }
        }
        let jac = softmax_jacobian_error(6)?;
        Ok((
            worst <= 1e-4 && model_worst <= 1e-4 && jac <= 1e-12,
            format!(
                "worst primitive {worst_name} {worst:.2e}; model loss {model_worst:.2e}; softmax Jacobian at zero {jac:.1e}"
            ),
        ))
    })
}

/// Relative FD error of the model loss over every parameter entry.
pub fn model_gradient_error(kind: NormalizerKind, seed: u64) -> Result<f64> {
    let cfg = TrainConfig {
        layers: 2,
        heads: 2,
        d: 8,
        d_ff: 12,
        normalizer: kind,
        sinkhorn_k: 10,
        seed,
        task: train::ToyTask {
            vocab: 5,
            n: 6,
            classes: 3,
        },
        ..TrainConfig::default()
    };
    let ck = train::init_checkpoint(&cfg)?;
    let values = train::checkpoint_params(&ck)?;
    let ex = &train::gen_dataset(&cfg.task, 1, seed)[0];
    let (_, grads) = train::example_gradients(&ck.config, &values, ex)?;
    let h = 1e-5;
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for (k, v) in values.iter().enumerate() {
        for e in 0..v.as_slice().len() {
            let mut plus = values.clone();
            plus[k].as_mut_slice()[e] += h;
            let mut minus = values.clone();
            minus[k].as_mut_slice()[e] -= h;
            let fd = (train::example_gradients(&ck.config, &plus, ex)?.0 - train::example_gradients(&ck.config, &minus, ex)?.0)
                / (2.0 * h);
            err = err.max((grads[k].as_slice()[e] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(err / scale.max(1e-6))
}

/// Max entry difference between the row softmax Jacobian at zero logits and
/// `(1/n)I − (1/n²)11ᵀ`.
pub fn softmax_jacobian_error(n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..n {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros(1, n));
        let y = t.row_softmax(x);
        let mut e = Mat::zeros(1, n);
        e[(0, k)] = 1.0;
        let out = weighted_sum(&mut t, y, &e)?;
        let g = t.backward(out)?.wrt(x, (1, n));
        for j in 0..n {
            let expect = if j == k { 1.0 / n as f64 } else { 0.0 } - 1.0 / (n * n) as f64;
            worst = worst.max((g[(0, j)] - expect).abs());
        }
    }
    Ok(worst)
}

/// CSV bytes of every deterministic pipeline, for comparing two runs.
pub fn artifact_bytes(exec: Exec, ck: &Checkpoint, seed: u64) -> Result<Vec<Vec<u8>>> {
    let mut files = Vec::new();
    let layers = ck.config.layers;
    let depths: Vec<usize> = (1..=layers).collect();
    let mut buf = Vec::new();
    let rows = paths_experiment(exec, ck, Setting::SanSkip, &depths, 20, seed)?;
    pipeline::write_paths_csv(ck, Setting::SanSkip, &rows, true, &mut buf)?;
    files.push(buf);

    let mut buf = Vec::new();
    let curve = layers_experiment(exec, ck, Setting::Transformer)?;
    pipeline::write_layers_csv(ck, Setting::Transformer, &curve, true, &mut buf)?;
    files.push(buf);

    let mut buf = Vec::new();
    let cfg = RandomProductConfig {
        n: 8,
        max_depth: 6,
        samples: 10,
        ..RandomProductConfig::new(NormalizerKind::Sinkhorn, true, seed)
    };
    let rows = random_product_experiment_with(exec, &cfg, Replacement::Half)?;
    crate::randomprod::write_csv(&rows, cfg.kind, cfg.skip_sim, true, &mut buf)?;
    files.push(buf);

    let mut buf = Vec::new();
    let spec = TrialSpec::standard(BoundVariant::Mhml, 2, 2);
    let rows = bounds_experiment(exec, &spec, 10, seed)?;
    pipeline::write_bounds_csv(&spec, &rows, true, &mut buf)?;
    files.push(buf);
    Ok(files)
}

/// Two single-threaded runs of each pipeline give identical bytes, and the
/// parallel run matches them.
pub fn check_determinism(ck: &Checkpoint, seed: u64) -> CheckResult {
    timed("determinism", true, || {
        let a = artifact_bytes(Exec::Sequential, ck, seed)?;
        let b = artifact_bytes(Exec::Sequential, ck, seed)?;
        let c = artifact_bytes(Exec::Parallel, ck, seed)?;
        let names = ["paths", "layers", "random-products", "bounds"];
        let differing: Vec<&str> = (0..a.len()).filter(|&i| a[i] != b[i] || a[i] != c[i]).map(|i| names[i]).collect();
        Ok((
            differing.is_empty(),
            if differing.is_empty() {
                format!("{} artifacts byte-identical across runs and schedules", names.len())
            } else {
                format!("differing artifacts: {differing:?}")
            },
        ))
    })
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub exec: Exec,
    /// Trains three seeds of each normalizer for the trained-model checks.
    pub include_training: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            exec: Exec::default(),
            include_training: true,
        }
    }
}

/// Runs the whole suite, logging each result as it completes.
pub fn run(opts: &VerifyOptions) -> Vec<CheckResult> {
    let seed = opts.seed;
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        log::info!("{}", r.line());
        out.push(r);
    };
    push(check_sinkhorn_correctness(seed));
    push(check_shift_invariance(seed));
    push(check_linearization(seed));
    push(check_projector_suite(seed));
    push(check_cubic_rate(seed));
    push(check_bounds(opts.exec, seed));
    push(check_norm_relation(seed));
    push(check_gradients(seed));
    let medians = random_product_medians(opts.exec, seed);
    match &medians {
        Ok(m) => push(check_random_products(m)),
        Err(e) => push(timed("random_products", true, || Ok((false, format!("error: {e}"))))),
    }
    let mut det_ck = train::init_checkpoint(&TrainConfig {
        seed,
        ..TrainConfig::default()
    });
    if opts.include_training {
        let seeds: Vec<u64> = (0..3).map(|i| seed + i).collect();
        match train_models(opts.exec, &seeds) {
            Ok(models) => {
                push(check_trained_ordering(opts.exec, &models, seed));
                push(check_skip_effect(opts.exec, &models));
                if let Ok(m) = &medians {
                    push(check_random_vs_trained(opts.exec, m, &models, seed));
                }
                det_ck = Ok(models.sinkhorn[0].clone());
            }
            Err(e) => push(timed("training", true, || Ok((false, format!("error: {e}"))))),
        }
    }
    match det_ck {
        Ok(ck) => push(check_determinism(&ck, seed)),
        Err(e) => push(timed("determinism", true, || Ok((false, format!("error: {e}"))))),
    }
    out
}
