use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinkrank::attention::{Checkpoint, Setting};
use sinkrank::bounds::{BoundVariant, TrialSpec};
use sinkrank::pipeline;
use sinkrank::randomprod::{self, random_product_experiment_with, RandomProductConfig, Replacement};
use sinkrank::train::{self, TrainConfig};
use sinkrank::verify::{self, VerifyOptions};
use sinkrank::{Error, Exec, NormalizerKind};

const DEFAULT_SEED: u64 = 42;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sinkrank", version, about = "Rank collapse of Sinkhorn and Softmax attention")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for all randomness [default: 42; train falls back to the config's seed].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

impl Global {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a classifier on the toy task and save a checkpoint.
    Train {
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        normalizer: Option<NormalizerKind>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Normalized residuals of random attention paths in a trained model.
    Paths {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        setting: Setting,
        /// Inclusive range `a..b` or a comma list [default: every depth up to L].
        #[arg(long)]
        depths: Option<String>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized residual of each layer's output in a trained model.
    Layers {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Products of random stochastic matrices.
    RandomProducts {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 24)]
        max_depth: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        kind: NormalizerKind,
        /// Replace half of the factors by the identity.
        #[arg(long)]
        skip_sim: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual bound trials on random pure Sinkhorn networks.
    Bounds {
        #[arg(long)]
        variant: BoundVariant,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0.05)]
        res_scale: f64,
        /// [default: 1 for single/shml, 2 otherwise]
        #[arg(long)]
        heads: Option<usize>,
        /// [default: 1 for single/mhsl, 2 otherwise]
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First-order expansion error of the normalizers around uniform logits.
    ApproxCheck {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3,1e-4")]
        t_grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; exits 2 if any gated check fails.
    Verify {
        /// Skip the checks that need trained models.
        #[arg(long)]
        skip_training: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Verification,
    Divergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_) | Error::NonFinite { .. } => Failure::Divergence(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse_depths(spec: &str, max: usize) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("bad --depths '{spec}'"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let depths: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        (num(a)?..=num(b.strip_prefix('=').unwrap_or(b))?).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if depths.is_empty() || depths.iter().any(|&t| t == 0 || t > max) {
        return Err(Failure::Usage(format!("--depths must lie in 1..={max}")));
    }
    Ok(depths)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Train {
            config,
            out,
            metrics,
            normalizer,
            max_epochs,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<TrainConfig>(&text)
                        .map_err(|e| Failure::Usage(format!("malformed config {}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(k) = normalizer {
                cfg.normalizer = k;
            }
            if let Some(e) = max_epochs {
                cfg.max_epochs = e;
            }
            cfg.validate()?;
            let res = train::train_with(g.exec(), &cfg)?;
            log::info!(
                "final train accuracy {:.4} (target {} {})",
                res.final_train_accuracy,
                cfg.target_accuracy,
                if res.reached_target { "reached" } else { "not reached" }
            );
            res.checkpoint.save(&out)?;
            if let Some(m) = metrics {
                let mut w = sink(Some(&m))?;
                train::write_metrics_csv(&res.history, &mut w)?;
                w.flush()?;
            }
        }
        Cmd::Paths {
            ckpt,
            setting,
            depths,
            samples,
            out,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let layers = ck.config.layers;
            let depths = match depths {
                Some(s) => parse_depths(&s, layers)?,
                None => (1..=layers).collect(),
            };
            let rows = pipeline::paths_experiment(g.exec(), &ck, setting, &depths, samples, g.seed())?;
            let mut w = sink(out.as_deref())?;
            pipeline::write_paths_csv(&ck, setting, &rows, true, &mut w)?;
            w.flush()?;
        }
        Cmd::Layers { ckpt, setting, out } => {
            let ck = load_ckpt(&ckpt)?;
            let curve = pipeline::layers_experiment(g.exec(), &ck, setting)?;
            let mut w = sink(out.as_deref())?;
            pipeline::write_layers_csv(&ck, setting, &curve, true, &mut w)?;
            w.flush()?;
        }
        Cmd::RandomProducts {
            n,
            max_depth,
            samples,
            kind,
            skip_sim,
            out,
        } => {
            let cfg = RandomProductConfig {
                n,
                max_depth,
                samples,
                ..RandomProductConfig::new(kind, skip_sim, g.seed())
            };
            let rows = random_product_experiment_with(g.exec(), &cfg, Replacement::Half)?;
            let mut w = sink(out.as_deref())?;
            randomprod::write_csv(&rows, kind, skip_sim, true, &mut w)?;
            w.flush()?;
        }
        Cmd::Bounds {
            variant,
            trials,
            res_scale,
            heads,
            layers,
            n,
            d,
            out,
        } => {
            let (dh, dl) = match variant {
                BoundVariant::Single => (1, 1),
                BoundVariant::Shml => (1, 2),
                BoundVariant::Mhsl => (2, 1),
                BoundVariant::Mhml => (2, 2),
            };
            let (heads, layers) = (heads.unwrap_or(dh), layers.unwrap_or(dl));
            if !variant.admits(heads, layers) {
                return Err(Failure::Usage(format!("{variant} does not admit H={heads}, L={layers}")));
            }
            if !(res_scale > 0.0 && res_scale.is_finite()) {
                return Err(Failure::Usage("--res-scale must be positive".into()));
            }
            let spec = TrialSpec {
                n,
                d,
                res_scale,
                ..TrialSpec::standard(variant, heads, layers)
            };
            let rows = pipeline::bounds_experiment(g.exec(), &spec, trials, g.seed())?;
            let sat = rows.iter().filter(|r| r.1.satisfied).count();
            log::info!("{variant}: bound satisfied in {sat}/{trials} trials");
            let mut w = sink(out.as_deref())?;
            pipeline::write_bounds_csv(&spec, &rows, true, &mut w)?;
            w.flush()?;
        }
        Cmd::ApproxCheck { n, t_grid, out } => {
            if t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return Err(Failure::Usage("--t-grid values must be positive".into()));
            }
            let rows = pipeline::approx_experiment(n, &t_grid, g.seed())?;
            let mut w = sink(out.as_deref())?;
            pipeline::write_approx_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Cmd::Verify { skip_training } => {
            let opts = VerifyOptions {
                seed: g.seed(),
                exec: g.exec(),
                include_training: !skip_training,
            };
            let results = verify::run(&opts);
            let mut out = io::stdout().lock();
            for r in &results {
                writeln!(out, "{}", r.line())?;
            }
            if !verify::all_passed(&results) {
                return Err(Failure::Verification);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Divergence(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DIVERGENCE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_specs() {
        assert_eq!(parse_depths("1..3", 6).unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_depths("1..=6", 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_depths("2,5", 6).unwrap(), vec![2, 5]);
        assert!(parse_depths("0..3", 6).is_err());
        assert!(parse_depths("1..=7", 6).is_err());
        assert!(parse_depths("x", 6).is_err());
    }

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
