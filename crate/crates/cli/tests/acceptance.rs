//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line to the
//! real stdout, so the lines show up even when output capture is on.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use sinkrank::verify::{self, CheckResult, RandomProductMedians, TrainedModels};
use sinkrank::Exec;

const SEED: u64 = 42;

fn report(criterion: &str, r: &CheckResult) {
    let line = format!(
        "{} {criterion} ({:.1}s): {}\n",
        if r.passed { "PASS" } else { "FAIL" },
        r.seconds,
        r.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(r.passed, "{criterion} failed: {}", r.detail);
}

fn trained() -> &'static TrainedModels {
    static MODELS: OnceLock<TrainedModels> = OnceLock::new();
    MODELS.get_or_init(|| verify::train_models(Exec::default(), &[SEED, SEED + 1, SEED + 2]).expect("training"))
}

fn random_medians() -> &'static RandomProductMedians {
    static MEDIANS: OnceLock<RandomProductMedians> = OnceLock::new();
    MEDIANS.get_or_init(|| verify::random_product_medians(Exec::default(), SEED).expect("random products"))
}

#[test]
fn sinkhorn_correctness() {
    report("sinkhorn correctness", &verify::check_sinkhorn_correctness(SEED));
}

#[test]
fn shift_invariance() {
    report("shift invariance", &verify::check_shift_invariance(SEED));
}

#[test]
fn linearization() {
    report("linearization o(t)", &verify::check_linearization(SEED));
}

#[test]
fn projector_suite() {
    report("projector suite", &verify::check_projector_suite(SEED));
}

#[test]
fn cubic_rate() {
    report("cubic rate", &verify::check_cubic_rate(SEED));
}

#[test]
fn bound_satisfaction() {
    report("bound satisfaction", &verify::check_bounds(Exec::default(), SEED));
}

#[test]
fn norm_inequality() {
    report("l2 vs l1-inf inequality", &verify::check_norm_relation(SEED));
}

#[test]
fn random_products() {
    report("random products", &verify::check_random_products(random_medians()));
}

#[test]
fn trained_rank_ordering() {
    report(
        "trained rank ordering",
        &verify::check_trained_ordering(Exec::default(), trained(), SEED),
    );
}

#[test]
fn skip_connection_effect() {
    report("skip connection effect", &verify::check_skip_effect(Exec::default(), trained()));
}

#[test]
fn gradient_checks() {
    report("gradient checks", &verify::check_gradients(SEED));
}

fn sinkrank(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_sinkrank"))
        .current_dir(dir)
        .args(args)
        .args(["--sequential", "--seed", "7"])
        .output()
        .expect("spawn sinkrank");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn determinism() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"layers": 3, "d": 8, "d_ff": 16, "train_size": 64, "max_epochs": 1}"#,
    )
    .unwrap();
    sinkrank(dir.path(), &["train", "--config", "cfg.json", "--out", "ck.json"]);
    let runs: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|_| {
            vec![
                sinkrank(dir.path(), &["paths", "--ckpt", "ck.json", "--setting", "san_skip", "--samples", "20"]),
                sinkrank(dir.path(), &["layers", "--ckpt", "ck.json", "--setting", "transformer"]),
                sinkrank(
                    dir.path(),
                    &["random-products", "--kind", "sinkhorn", "--n", "8", "--max-depth", "6", "--samples", "10", "--skip-sim"],
                ),
                sinkrank(dir.path(), &["bounds", "--variant", "mhml", "--trials", "20"]),
            ]
        })
        .collect();
    let names = ["paths", "layers", "random-products", "bounds"];
    let differing: Vec<&str> = (0..names.len()).filter(|&i| runs[0][i] != runs[1][i]).map(|i| names[i]).collect();
    let nonempty = runs[0].iter().all(|f| f.iter().filter(|&&b| b == b'\n').count() > 1);
    let r = CheckResult {
        name: "determinism",
        passed: differing.is_empty() && nonempty,
        gated: true,
        detail: if differing.is_empty() {
            format!("{} CLI artifacts byte-identical across two single-thread runs", names.len())
        } else {
            format!("differing: {differing:?}")
        },
        seconds: start.elapsed().as_secs_f64(),
    };
    report("determinism", &r);
}
