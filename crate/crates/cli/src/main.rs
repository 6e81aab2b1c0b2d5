use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tpgsr::harness::{self, gradsuite, AblationAxis, RunConfig};

#[derive(Parser)]
#[command(name = "tpgsr", version, about = "Text-prior guided super-resolution of low-resolution text images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic HR/LR dataset file.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        train: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        test: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the recognizer on HR images; writes recognizer.ckpt into --out.
    PretrainRec {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model (single stage, then multi-stage fine-tuning).
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Zero and freeze the fusion projections (prior-free baseline).
        #[arg(long)]
        no_tp: bool,
        /// Keep the prior recognizer frozen.
        #[arg(long)]
        fixed_tpg: bool,
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Evaluate a run's final checkpoint and print the report table.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Evaluate on this dataset instead of the run's own.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write eval_*.csv and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve one PGM/PNG image and decode every stage.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        trials: u64,
    },
    /// Train and evaluate one configuration per value of an axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// tuned, stages or sharing.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    recognizer: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = p.clone();
        }
        if let Some(p) = &self.recognizer {
            cfg.recognizer = p.clone();
        }
        if let Some(p) = &self.run_dir {
            cfg.run_dir = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { train, test, seed, out } => {
            let m = harness::gen_data(train as usize, test as usize, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::PretrainRec { run, out } => {
            let mut cfg = run.config()?;
            if let Some(out) = out {
                cfg.run_dir = out;
            }
            let quiet = run.quiet;
            let outcome = harness::run_pretrain(&cfg, &mut |e| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  val acc {:.2}%  val loss {:.4}",
                        e.epoch,
                        e.mean_loss,
                        100.0 * e.val_accuracy,
                        e.val_loss
                    );
                }
            })?;
            println!(
                "best epoch {} (val {:.2}%), test HR {:.2}%, bicubic {:.2}%",
                outcome.report.best_epoch,
                100.0 * outcome.report.best_val_accuracy,
                100.0 * outcome.hr_test_accuracy,
                100.0 * outcome.bicubic_test_accuracy
            );
            println!("wrote {}", outcome.checkpoint.display());
        }
        Command::Train {
            run,
            no_tp,
            fixed_tpg,
            stages,
        } => {
            let mut cfg = run.config()?;
            if no_tp {
                cfg.use_tp = false;
            }
            if fixed_tpg {
                cfg.tuned = false;
            }
            if let Some(n) = stages {
                cfg.stages = n;
                cfg.lambdas = None;
            }
            let quiet = run.quiet;
            let summary = harness::run_train(&cfg, &mut |m| {
                if !quiet {
                    eprintln!("{}", m.csv_row());
                }
            })?;
            print!("{}", summary.report.to_table());
            println!("wrote {}", cfg.run_dir.display());
        }
        Command::Eval { run, dataset, out } => {
            let report = harness::run_eval(&run, dataset.as_deref())?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                harness::write_eval_report(&out, &report)?;
            }
            print!("{}", report.to_table());
        }
        Command::Infer { run, image, out } => {
            for s in harness::run_infer(&run, &image, &out)? {
                println!("stage {}: {:<10} {}", s.stage, s.text, s.output.display());
            }
        }
        Command::Gradcheck { trials } => {
            let entries = gradsuite::run_suite(trials)?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:<5} {:<32} max rel err {:.3e} (< {:.0e}, {} probes, {} kinks)",
                    e.name, e.max_rel_error, e.tolerance, e.checked, e.kinks
                );
                if !e.passed() {
                    failed += 1;
                    if let Some((t, i, a, n)) = &e.worst {
                        println!("      worst {t}[{i}]: analytic {a:.6e}, numeric {n:.6e}");
                    }
                }
            }
            let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
            println!("max rel err {worst:.3e}, {failed} failed");
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { run, axis, values } => {
            let cfg = run.config()?;
            let axis: AblationAxis = axis.parse()?;
            if values.iter().any(|v| v.trim().is_empty()) {
                bail!("empty ablation value");
            }
            let ds = harness::open_dataset(&cfg.dataset)?;
            let mut scorer = harness::load_scorer(&cfg)?;
            let quiet = run.quiet;
            let rows = harness::run_ablation(&cfg, &ds, &mut scorer, axis, &values, &mut |v, m| {
                if !quiet {
                    eprintln!("[{v}] {}", m.csv_row());
                }
            })?;
            let csv = harness::ablation_csv(&rows);
            std::fs::create_dir_all(&cfg.run_dir)?;
            std::fs::write(cfg.run_dir.join("ablation.csv"), &csv)?;
            println!("{:<8} {:>8} {:>9} {:>7}", "value", "acc", "psnr_db", "ssim");
            for r in &rows {
                if let Some(m) = r.report.method(tpgsr::eval::SR) {
                    let a = m.average();
                    println!("{:<8} {:>7.2}% {:>9.3} {:>7.4}", r.value, 100.0 * a.acc, a.psnr_db, a.ssim);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
