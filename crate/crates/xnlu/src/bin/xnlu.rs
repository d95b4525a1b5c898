//! Experiment CLI: synthetic corpus generation, training, evaluation, grid
//! comparison, and the two-proportion significance test.
//!
//! Exit codes: 0 success, 1 validation error (bad config/spec/arguments),
//! 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xnlu::data::{self, CipherSpec};
use xnlu::eval;
use xnlu::trainer::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "xnlu", about = "Zero-shot cross-lingual NLU laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus from a cipher spec
    GenCorpus {
        /// cipher spec (JSON: templates, slot_fillers, cipher, noise, ...)
        #[arg(long)]
        spec: PathBuf,
        /// output directory (eng.jsonl, tar.jsonl, tar_gold.jsonl)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// utterances generated per intent
        #[arg(long, default_value_t = 200)]
        n_per_intent: usize,
        /// derive missing cipher entries automatically
        #[arg(long, default_value_t = false)]
        auto_cipher: bool,
    },
    /// Train one experiment from a config file
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a labelled corpus
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every config in a directory and rank the results
    Grid {
        /// directory of *.json experiment configs
        #[arg(long)]
        configs: PathBuf,
    },
    /// Two-tailed z-test for the difference of two proportions
    Significance {
        #[arg(long)]
        k1: usize,
        #[arg(long)]
        n1: usize,
        #[arg(long)]
        k2: usize,
        #[arg(long)]
        n2: usize,
    },
}

/// Failures before any real work starts (exit 1) vs. mid-run (exit 2).
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Validation(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Failure::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => failure.report(),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenCorpus {
            spec,
            out,
            seed,
            n_per_intent,
            auto_cipher,
        } => gen_corpus(&spec, &out, seed, n_per_intent, auto_cipher),
        Command::Train { config } => {
            let config = load_config(&config)?;
            let record = trainer::train(&config).map_err(runtime)?;
            if let Some(tar) = &record.final_tar {
                println!("target:  {}", tar.summary_line());
            }
            if let Some(eng) = &record.final_eng {
                println!("english: {}", eng.summary_line());
            }
            println!(
                "artifacts in {} ({} steps, {:.1}s)",
                record.config.output_dir.display(),
                record.steps.len(),
                record.wall_clock_secs
            );
            Ok(())
        }
        Command::Evaluate { checkpoint, data } => {
            for (name, p) in [("checkpoint", &checkpoint), ("data", &data)] {
                if !p.exists() {
                    return Err(Failure::Validation(format!("{name} file {p:?} not found")));
                }
            }
            let report = trainer::evaluate_checkpoint(&checkpoint, &data).map_err(runtime)?;
            println!("{}", report.summary_line());
            println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            Ok(())
        }
        Command::Grid { configs } => grid(&configs),
        Command::Significance { k1, n1, k2, n2 } => {
            let r = eval::z_test_proportions(k1, n1, k2, n2).map_err(validation)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(runtime)?);
            Ok(())
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {path:?}: {e}")))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("bad config {path:?}: {e}")))?;
    config.validate().map_err(validation)?;
    // echo the config text verbatim into the run directory
    std::fs::create_dir_all(&config.output_dir).map_err(runtime)?;
    std::fs::write(config.output_dir.join("config.json"), &text).map_err(runtime)?;
    Ok(config)
}

fn gen_corpus(
    spec_path: &PathBuf,
    out: &PathBuf,
    seed: u64,
    n_per_intent: usize,
    auto_cipher: bool,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Failure::Validation(format!("cannot read spec {spec_path:?}: {e}")))?;
    let mut spec: CipherSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("bad spec {spec_path:?}: {e}")))?;
    if auto_cipher {
        spec = spec.with_auto_cipher();
    }
    spec.validate().map_err(validation)?;
    let corpus = data::gen_synthetic(&spec, n_per_intent, seed).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    data::save_corpus(&out.join("eng.jsonl"), &corpus.eng).map_err(runtime)?;
    data::save_corpus(&out.join("tar.jsonl"), &corpus.tar).map_err(runtime)?;
    data::save_corpus(&out.join("tar_gold.jsonl"), &corpus.tar_gold).map_err(runtime)?;
    println!(
        "wrote {} utterances per side to {}",
        corpus.eng.len(),
        out.display()
    );
    Ok(())
}

fn grid(configs_dir: &PathBuf) -> Result<(), Failure> {
    let mut configs = Vec::new();
    let entries = std::fs::read_dir(configs_dir)
        .map_err(|e| Failure::Validation(format!("cannot read {configs_dir:?}: {e}")))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != "grid_report.json")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Validation(format!(
            "no *.json configs in {configs_dir:?}"
        )));
    }
    for path in paths {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        configs.push((name, load_config(&path)?));
    }
    let report = trainer::run_grid(&configs);
    println!("{:<24} {:>8} {:>8} {:>8}", "config", "acc", "F", "overall");
    for row in &report.rows {
        match (&row.tar, &row.error) {
            (Some(m), _) => println!(
                "{:<24} {:>8.1} {:>8.1} {:>8.1}",
                row.name,
                m.intent_accuracy * 100.0,
                m.entity_f1 * 100.0,
                m.overall * 100.0
            ),
            (None, Some(e)) => println!("{:<24} FAILED: {e}", row.name),
            (None, None) => println!("{:<24} (no target eval)", row.name),
        }
    }
    for z in &report.pairwise {
        println!(
            "z({} vs {}) = {:.3}, p = {:.4}",
            z.a, z.b, z.z, z.p_two_tailed
        );
    }
    let out = configs_dir.join("grid_report.json");
    std::fs::write(
        &out,
        serde_json::to_vec_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!("report written to {}", out.display());
    Ok(())
}
