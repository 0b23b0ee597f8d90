//! `dfalab` command-line driver.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print
//! `{"error": <kind>, "message": <text>}` on stderr and exit with status 1
//! (2 for command-line usage errors).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use dfalab::compute::Accounting;
use dfalab::harness::check::run_checks;
use dfalab::harness::corpus::{ingest, synthetic_text, Corpus};
use dfalab::harness::logs::{load_dir, summary, write_run};
use dfalab::harness::report::{build_report, report_json, write_plots, DEFAULT_EXCLUDE_FRACTION};
use dfalab::harness::sweep::{sweep, sweep_stem};
use dfalab::harness::{parse_grid, train_run, RunConfig};
use dfalab::model::checkpoint;
use dfalab::{Error, Result};

#[derive(Parser)]
#[command(name = "dfalab", version, about = "Train byte-level decoders with backpropagation or direct feedback alignment and compare their compute frontiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize text files (or directories of them) into a corpus file.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write deterministic synthetic English-like text.
    Synth {
        #[arg(long)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write its logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus file; defaults to the config's `dataset`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also save the final model.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Train every point of a grid and select the best learning rate per mode and size.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Receives `runs/` with every run and `best/` with the selected ones.
        #[arg(long)]
        out: PathBuf,
        /// Run grid points one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Fit compute frontiers over a directory of run logs.
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// `standard`, `optimistic` or `exact_blockwise`.
        #[arg(long, default_value = "standard")]
        accounting: String,
        #[arg(long, default_value_t = DEFAULT_EXCLUDE_FRACTION)]
        exclude_fraction: f64,
    },
    /// Finite-difference gradient checks and invariant suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_corpus(flag: Option<PathBuf>, config: &RunConfig) -> Result<Corpus> {
    let path = flag
        .or_else(|| config.dataset.clone())
        .ok_or_else(|| Error::Usage("no corpus: pass --corpus or set `dataset`".into()))?;
    Corpus::load(&path)
}

fn run(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Ingest { paths, out } => {
            let c = ingest(&paths)?;
            c.save(&out)?;
            Ok(json!({"tokens": c.len(), "documents": c.n_documents(), "out": out}))
        }
        Command::Synth { bytes, seed, out } => {
            fs::write(&out, synthetic_text(seed, bytes))?;
            Ok(json!({"bytes": bytes, "seed": seed, "out": out}))
        }
        Command::Train {
            config,
            corpus,
            out,
            save_model,
        } => {
            let cfg = RunConfig::parse(&read_text(&config)?)?;
            let corpus = load_corpus(corpus, &cfg)?;
            let outcome = train_run(&cfg, &corpus)?;
            let stem = cfg.run_id();
            let log = write_run(&out, &stem, &outcome)?;
            if let Some(p) = save_model {
                let mut w = std::io::BufWriter::new(fs::File::create(&p)?);
                checkpoint::save(&outcome.model, &mut w)?;
                w.flush()?;
            }
            let mut v = serde_json::to_value(summary(&outcome, &stem))?;
            v["log"] = json!(log);
            Ok(v)
        }
        Command::Sweep {
            grid,
            corpus,
            out,
            sequential,
        } => {
            let configs = parse_grid(&read_text(&grid)?)?;
            let corpus = load_corpus(corpus, &configs[0])?;
            let res = sweep(&configs, &corpus, !sequential)?;
            let runs_dir = out.join("runs");
            let best_dir = out.join("best");
            let mut runs = Vec::new();
            for r in &res.runs {
                let stem = sweep_stem(&r.config);
                write_run(&runs_dir, &stem, r)?;
                runs.push(summary(r, &stem));
            }
            let mut best = Vec::new();
            for (_, r) in res.best_runs() {
                write_run(&best_dir, &r.config.run_id(), r)?;
                best.push(summary(r, &sweep_stem(&r.config)));
            }
            let v = json!({"runs": runs, "best": best});
            fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&v)? + "\n")?;
            Ok(v)
        }
        Command::Report {
            logs,
            out,
            plot,
            accounting,
            exclude_fraction,
        } => {
            let accounting: Accounting = accounting.parse()?;
            let runs = load_dir(&logs)?;
            let report = build_report(&runs, accounting, exclude_fraction)?;
            let v = report_json(&report);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, serde_json::to_string_pretty(&v)? + "\n")?;
            if let Some(dir) = plot {
                write_plots(&dir, &report)?;
            }
            Ok(v)
        }
        Command::Check { seed } => {
            let r = run_checks(seed)?;
            let v = serde_json::to_value(&r)?;
            if !r.passed {
                let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(Error::Validation(format!("checks failed: {}", failed.join(", "))));
            }
            Ok(v)
        }
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
