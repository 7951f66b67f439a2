use std::path::PathBuf;
use std::process::ExitCode;

use cdl::config::RunConfig;
use cdl::error::Error;
use cdl::pipeline::{self, with_threads};
use cdl::verify;
use clap::{Args, Parser, Subcommand};

/// Drift-robust registration with a learned communal-domain metric.
#[derive(Parser, Debug)]
#[command(name = "cdl", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set train_iters=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantom pairs, masks and ground-truth transforms.
    Synth {
        #[arg(long)]
        drift: Option<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Train the metric network on the manifest's aligned pairs.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Training iterations K.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Register one pair or every test pair in the manifest.
    Register(RegisterArgs),
    /// Dice / Hausdorff report, rank-sum tests and gain curves.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Gradient, oracle and density self-checks.
    Verify,
    /// Transformed-Gaussian density grid.
    Densitycheck,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma list of cdl, mi, mi+m, mi+b.
    #[arg(long)]
    methods: Option<String>,
    /// Ground-truth transform; with --target-mask adds per-iteration Dice.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    target_mask: Option<PathBuf>,
    /// Mask for mi+b.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
}

fn push<T: ToString>(v: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(x) = value {
        v.push((key.into(), x.to_string()));
    }
}

fn path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, Error> {
    let mut v = Vec::new();
    for s in &cli.set {
        let (k, val) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        v.push((k.trim().to_owned(), val.trim().to_owned()));
    }
    push(&mut v, "seed", cli.seed);
    push(&mut v, "out", path(cli.out.clone()));
    push(&mut v, "threads", cli.threads);
    match &cli.command {
        Command::Synth { drift, n_train, n_test, grid_size } => {
            push(&mut v, "drift", drift.clone());
            push(&mut v, "n_train_pairs", *n_train);
            push(&mut v, "n_test_pairs", *n_test);
            push(&mut v, "grid_size", *grid_size);
        }
        Command::Train { manifest, iters } => {
            push(&mut v, "manifest", path(manifest.clone()));
            push(&mut v, "train_iters", *iters);
        }
        Command::Register(a) => {
            push(&mut v, "manifest", path(a.manifest.clone()));
            push(&mut v, "target", path(a.target.clone()));
            push(&mut v, "source", path(a.source.clone()));
            push(&mut v, "model", path(a.model.clone()));
            push(&mut v, "methods", a.methods.clone());
            push(&mut v, "truth", path(a.truth.clone()));
            push(&mut v, "target_mask", path(a.target_mask.clone()));
            push(&mut v, "mask", path(a.mask.clone()));
            push(&mut v, "max_iters", a.max_iters);
            push(&mut v, "mode", a.mode.clone());
        }
        Command::Evaluate { manifest, results, methods } => {
            push(&mut v, "manifest", path(manifest.clone()));
            push(&mut v, "results", path(results.clone()));
            push(&mut v, "methods", methods.clone());
        }
        Command::Verify | Command::Densitycheck => {}
    }
    // Quote strings that would otherwise read as JSON literals.
    for (k, val) in v.iter_mut() {
        if matches!(k.as_str(), "out" | "manifest" | "target" | "source" | "model" | "truth" | "target_mask" | "mask" | "results")
            && serde_json::from_str::<serde_json::Value>(val).is_ok_and(|j| !j.is_string())
        {
            *val = serde_json::Value::String(val.clone()).to_string();
        }
    }
    Ok(v)
}

fn run(cli: &Cli) -> Result<i32, Error> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(cli)?)?;
    with_threads(cfg.threads, || -> Result<i32, Error> {
        match &cli.command {
            Command::Synth { .. } => {
                let out = pipeline::cmd_synth(&cfg)?;
                println!("wrote {} pairs to {}", out.entries.len(), out.manifest.display());
                for id in out.low_overlap {
                    eprintln!("warning: pair {id} keeps less than half of the phantom in view");
                }
                Ok(0)
            }
            Command::Train { .. } => {
                let out = pipeline::cmd_train(&cfg)?;
                let last = out.history.last().copied().unwrap_or(out.initial_cost);
                println!(
                    "{} after {} iterations: cost {:.6} -> {:.6}; model {}",
                    if out.converged { "converged" } else { "iteration cap reached" },
                    out.history.len(),
                    out.initial_cost,
                    last,
                    out.model_path.display()
                );
                Ok(out.exit_code())
            }
            Command::Register(_) => {
                let out = pipeline::cmd_register(&cfg)?;
                for r in &out.results {
                    let dice = r.registration.trace.rows.last().and_then(|row| row.dice);
                    println!(
                        "{} {}: cost {:.6} -> {:.6}{}  {}",
                        r.method.name(),
                        r.id,
                        r.registration.initial_cost,
                        r.registration.best_cost,
                        dice.map(|d| format!(", dice {d:.4}")).unwrap_or_default(),
                        r.xform.display()
                    );
                }
                Ok(0)
            }
            Command::Evaluate { .. } => {
                print!("{}", pipeline::cmd_evaluate(&cfg)?.summary);
                Ok(0)
            }
            Command::Verify => {
                let checks = match verify::cmd_verify(&cfg) {
                    Ok(c) => c,
                    Err(e) => {
                        let path = cfg.out_dir().join("verify.csv");
                        if let Ok(text) = std::fs::read_to_string(&path) {
                            print!("{text}");
                        }
                        return Err(e);
                    }
                };
                for c in checks {
                    println!("{:<28} {:>12.3e} <= {:<9.1e} {}", c.name, c.measured, c.tolerance, if c.pass { "ok" } else { "FAIL" });
                }
                Ok(0)
            }
            Command::Densitycheck => {
                let rows = pipeline::cmd_densitycheck(&cfg)?;
                println!("wrote {} rows to {}", rows.len(), cfg.out_dir().join("density.csv").display());
                Ok(0)
            }
        }
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
