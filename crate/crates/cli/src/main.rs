//! `mcx`: dataset generation, training, evaluation, ablation, parameter
//! counting and gradient checks for the multi-channel transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mcx::ablation::run_ablation;
use mcx::config::ExperimentConfig;
use mcx::dataset::{build_dataset, Dataset};
use mcx::eval::{evaluate, EvalReport};
use mcx::gradcheck::{layer_suite, model_gradcheck, SUITE_STEP};
use mcx::model::{count_parameters, parameter_breakdown, Model};
use mcx::train::{train_loop, RunPaths};
use mcx::{Error, Result};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "mcx", version, about = "Multi-channel transformer ASR toolkit")]
struct Cli {
    /// Worker threads for per-utterance parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-channel dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split with a checkpoint and print an EvalReport as JSON.
    Eval(EvalArgs),
    /// Train full / CSA-only / CCA-only variants and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Directory for per-run artefacts and `ablation.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter count with a per-block breakdown.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Check reverse-mode gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Parameter entries sampled for the config's own model.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Disable length normalisation in beam search.
    #[arg(long)]
    no_length_norm: bool,
    /// Report to compare against; adds a WERR entry.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: String,
    input_hash: String,
    files: Vec<&'a str>,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn hash_inputs(cfg_toml: &str, extra: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg_toml.as_bytes());
    for p in extra {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, inputs: &[PathBuf], files: Vec<&str>) -> Result<()> {
    let config = cfg.to_toml();
    let manifest = RunManifest {
        command,
        input_hash: hash_inputs(&config, inputs)?,
        config: config.clone(),
        files,
    };
    write_file(&dir.join("config.toml"), &config)?;
    write_file(
        &dir.join("run.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serialises"),
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_inputs(data: &Path) -> Vec<PathBuf> {
    ["meta.json", "train.jsonl", "valid.jsonl", "test.jsonl"]
        .iter()
        .map(|f| data.join(f))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let meta = build_dataset(&cfg, &out)?;
            write_manifest(&out, "gen", &cfg, &[], vec!["meta.json", "train.jsonl", "valid.jsonl", "test.jsonl", "feats/"])?;
            println!("{}", serde_json::to_string(&meta).expect("meta serialises"));
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let model_cfg = cfg.model_config()?;
            let train = Dataset::load(&data, "train")?;
            let valid = Dataset::load(&data, "valid")?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_manifest(&out, "train", &cfg, &data_inputs(&data), vec!["metrics.jsonl", "best.ckpt", "last.ckpt"])?;
            let paths = RunPaths { dir: out };
            let outcome = train_loop(
                &model_cfg,
                &train.utterances,
                &valid.utterances,
                &cfg.train,
                &cfg.eval,
                cfg.seed,
                Some(&paths),
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "best_step": outcome.best_step,
                    "best_valid_wer": outcome.best_valid_wer,
                    "checkpoint": paths.best(),
                })
            );
        }
        Command::Eval(a) => {
            let model = Model::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.data, &a.split)?;
            let eval = mcx::config::EvalConfig {
                beam: a.beam,
                length_norm: !a.no_length_norm,
                max_len: a.max_len,
            };
            let mut report = evaluate(&model, &ds.utterances, &eval)?;
            if let Some(b) = &a.baseline {
                let text = std::fs::read_to_string(b).map_err(|e| Error::io(b, e))?;
                let base: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format {
                    path: b.clone(),
                    msg: e.to_string(),
                })?;
                report = report.with_baseline(&b.display().to_string(), &base)?;
            }
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            if let Some(o) = &a.out {
                write_file(o, &json)?;
            }
            println!("{json}");
        }
        Command::Ablate { config, data, seeds, out } => {
            let cfg = load_config(&config, cli.seed)?;
            if let Some(o) = &out {
                std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
                write_manifest(o, "ablate", &cfg, &data_inputs(&data), vec!["ablation.csv", "ablation.json"])?;
            }
            let report = run_ablation(&cfg, &data, &seeds, out.as_deref())?;
            let csv = report.to_csv();
            if let Some(o) = &out {
                write_file(&o.join("ablation.csv"), &csv)?;
                write_file(
                    &o.join("ablation.json"),
                    &serde_json::to_string_pretty(&report).expect("report serialises"),
                )?;
            }
            print!("{csv}");
        }
        Command::Params { config, json } => {
            let cfg = load_config(&config, cli.seed)?;
            let model_cfg = cfg.model_config()?;
            let total = count_parameters(&model_cfg);
            let blocks = parameter_breakdown(&model_cfg);
            if json {
                let blocks: serde_json::Map<_, _> =
                    blocks.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
                println!("{}", serde_json::json!({ "total": total, "blocks": blocks }));
            } else {
                for (name, n) in &blocks {
                    println!("{name:<20} {n:>12}");
                }
                println!("{:<20} {total:>12} ({:.2}M)", "total", total as f64 / 1e6);
            }
        }
        Command::Gradcheck { config, samples } => {
            let cfg = load_config(&config, cli.seed)?;
            let model_cfg = cfg.model_config()?;
            let mut results = layer_suite(cfg.seed)?;
            let own = model_gradcheck(&model_cfg, 6, 3, samples, cfg.seed, SUITE_STEP)?;
            results.push(("config_model", own));
            let mut ok = true;
            for (name, r) in &results {
                let pass = r.max_rel_err < GRADCHECK_TOL;
                ok &= pass;
                println!(
                    "{} {name:<22} checked {:>6}  max rel err {:.3e}",
                    if pass { "PASS" } else { "FAIL" },
                    r.checked,
                    r.max_rel_err
                );
            }
            if !ok {
                return Err(Error::Numeric(format!("gradient check exceeded {GRADCHECK_TOL:e}")));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::Shape { .. } | Error::Index { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCX_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{err}");
            ExitCode::from(exit_code(&e))
        }
    }
}
