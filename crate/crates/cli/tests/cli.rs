use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcx::config::ExperimentConfig;
use mcx::model::Model;

fn mcx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

const TINY: &str = r#"
seed = 4

[scene]
noise_std = [0.5, 0.5]

[data]
utterances = 40

[model]
d_model = 8
d_ff = 16
heads = 2
enc_layers = 1
dec_layers = 1

[train]
max_steps = 4
eval_every = 2
batch_size = 4
"#;

#[test]
fn params_reports_paper_scale_count() {
    let cfg = configs().join("paper_mct2.toml");
    let out = mcx(&["params", "--config", cfg.to_str().unwrap(), "--json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total = v["total"].as_u64().unwrap() as f64;
    assert!((total / 13.63e6 - 1.0).abs() < 0.05, "{total}");
    let blocks: u64 = v["blocks"].as_object().unwrap().values().map(|b| b.as_u64().unwrap()).sum();
    assert_eq!(blocks as f64, total);

    let text = mcx(&["params", "--config", cfg.to_str().unwrap()]);
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.contains("encoder") && text.contains("13.05M"), "{text}");
}

#[test]
fn gradcheck_on_toy_config_passes() {
    let cfg = configs().join("toy.toml");
    let out = mcx(&["gradcheck", "--config", cfg.to_str().unwrap(), "--samples", "50"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("full_model"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nd_modle = 8\n").unwrap();
    let out = mcx(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("d_modle"), "{err}");
}

#[test]
fn invalid_values_and_missing_files_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("heads.toml");
    std::fs::write(&cfg, "[model]\nd_model = 10\nheads = 4\n").unwrap();
    assert_eq!(mcx(&["params", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    let out = mcx(&["params", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["kind"], "io");
}

#[test]
fn unknown_flag_is_fatal() {
    let out = mcx(&["params", "--config", "x.toml", "--verbose-please"]);
    assert!(!out.status.success());
    let help = String::from_utf8(mcx(&["eval", "--help"]).stdout).unwrap();
    for flag in ["--checkpoint", "--data", "--split", "--beam", "--max-len", "--no-length-norm", "--baseline", "--out", "--threads", "--seed"] {
        assert!(help.contains(flag), "missing {flag}");
    }
}

#[test]
fn gen_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (cfg_s, data, data2) = (cfg.to_str().unwrap(), root.join("data"), root.join("data2"));

    assert!(mcx(&["gen", "--config", cfg_s, "--out", data.to_str().unwrap()]).status.success());
    assert!(mcx(&["gen", "--config", cfg_s, "--out", data2.to_str().unwrap()]).status.success());
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "meta.json", "config.toml"] {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(data2.join(f)).unwrap(), "{f}");
    }
    let snapshot = std::fs::read_to_string(data.join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::parse(&snapshot).unwrap(), ExperimentConfig::load(&cfg).unwrap());

    let run = root.join("run");
    let out = mcx(&["train", "--config", cfg_s, "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let report_a = root.join("a.json");
    let eval = |ckpt: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()];
        args.extend_from_slice(extra);
        mcx(&args)
    };
    let out = eval(&run.join("best.ckpt"), &["--out", report_a.to_str().unwrap()]);
    assert!(out.status.success());
    let a: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(a, serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&report_a).unwrap()).unwrap());

    let out = eval(&run.join("last.ckpt"), &["--beam", "3", "--baseline", report_a.to_str().unwrap()]);
    assert!(out.status.success());
    let b: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let werr = b["baseline"]["werr"].as_f64().unwrap();
    let (wa, wb) = (b["wer"].as_f64().unwrap(), a["wer"].as_f64().unwrap());
    assert_eq!(werr, 1.0 - wa / wb);

    let bad = eval(&run.join("best.ckpt"), &["--split", "nosuch"]);
    assert!(!bad.status.success());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = root.join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let data = root.join("data");
    assert!(mcx(&["gen", "--config", cfg_path.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let ckpt = root.join("init.ckpt");
    Model::new(cfg.model_config().unwrap(), 9).unwrap().save(&ckpt).unwrap();
    let out = mcx(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["wer"].as_f64().unwrap() > 0.8);
}

#[test]
fn ablate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    assert!(mcx(&["gen", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let out_dir = root.join("abl");
    let out = mcx(&[
        "ablate", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--seeds", "1,2", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,wer,werr_vs_full");
    assert_eq!(lines.len(), 1 + 6 + 3);
    assert!(lines[1].starts_with("full,1,") && lines[1].ends_with(",0.000000"));
    assert!(out_dir.join("cca_only/seed2/best.ckpt").exists());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
}
