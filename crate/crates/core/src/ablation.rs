//! Multi-seed comparisons between model variants trained on one dataset.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Utterance};
use crate::error::Result;
use crate::eval::{evaluate, werr};
use crate::model::ModelConfig;
use crate::train::{train_loop, RunPaths};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

impl Variant {
    pub fn new(name: &str, model: ModelConfig) -> Self {
        Variant {
            name: name.to_string(),
            model,
        }
    }
}

/// The full model and its two single-attention ablations.
pub fn ablation_variants(base: &ModelConfig) -> Vec<Variant> {
    vec![
        Variant::new("full", ModelConfig { use_csa: true, use_cca: true, ..base.clone() }),
        Variant::new("csa_only", ModelConfig { use_csa: true, use_cca: false, ..base.clone() }),
        Variant::new("cca_only", ModelConfig { use_csa: false, use_cca: true, ..base.clone() }),
    ]
}

/// Single-channel baseline: same sizes, first channel only, CSA only.
pub fn single_channel_variant(base: &ModelConfig) -> Variant {
    Variant::new(
        "sct",
        ModelConfig {
            channels: 1,
            use_csa: true,
            use_cca: false,
            ..base.clone()
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub wer: f64,
    /// Relative WER reduction over the reference variant at the same seed.
    pub werr_vs_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_wer: f64,
    pub werr_vs_full: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn mean_wer(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.mean_wer)
    }

    /// `variant,seed,wer,werr_vs_full` with one `mean` row per variant.
    pub fn to_csv(&self) -> String {
        let fmt = |w: Option<f64>| w.map_or(String::new(), |w| format!("{w:.6}"));
        let mut s = String::from("variant,seed,wer,werr_vs_full\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{}", r.variant, r.seed, r.wer, fmt(r.werr_vs_full));
        }
        for m in &self.summary {
            let _ = writeln!(s, "{},mean,{:.6},{}", m.variant, m.mean_wer, fmt(m.werr_vs_full));
        }
        s
    }
}

/// Trains every variant under every seed and scores each on `test`.
///
/// The first variant is the reference for WERR. When `out` is given each
/// run writes into `out/{variant}/seed{seed}`.
#[allow(clippy::too_many_arguments)]
pub fn run_variants(
    variants: &[Variant],
    cfg: &ExperimentConfig,
    train: &[Utterance],
    valid: &[Utterance],
    test: &[Utterance],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for v in variants {
            let paths = out.map(|o| RunPaths {
                dir: o.join(&v.name).join(format!("seed{seed}")),
            });
            let outcome = train_loop(&v.model, train, valid, &cfg.train, &cfg.eval, seed, paths.as_ref())?;
            let report = evaluate(&outcome.best, test, &cfg.eval)?;
            log::info!("{} seed {seed}: test WER {:.4}", v.name, report.wer);
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                wer: report.wer,
                werr_vs_full: None,
            });
        }
    }
    let reference = variants.first().map(|v| v.name.clone()).unwrap_or_default();
    for i in 0..rows.len() {
        let base = rows
            .iter()
            .find(|r| r.variant == reference && r.seed == rows[i].seed)
            .map(|r| r.wer);
        rows[i].werr_vs_full = base.and_then(|b| werr(rows[i].wer, b).ok());
    }
    let mean = |name: &str| {
        let w: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(|r| r.wer).collect();
        w.iter().sum::<f64>() / w.len() as f64
    };
    let ref_mean = mean(&reference);
    let summary = variants
        .iter()
        .map(|v| {
            let m = mean(&v.name);
            VariantSummary {
                variant: v.name.clone(),
                mean_wer: m,
                werr_vs_full: werr(m, ref_mean).ok(),
            }
        })
        .collect();
    Ok(AblationReport {
        reference,
        rows,
        summary,
    })
}

/// Full / CSA-only / CCA-only comparison on a dataset directory.
pub fn run_ablation(cfg: &ExperimentConfig, data: &Path, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    let base = cfg.model_config()?;
    let train = Dataset::load(data, "train")?;
    let valid = Dataset::load(data, "valid")?;
    let test = Dataset::load(data, "test")?;
    run_variants(
        &ablation_variants(&base),
        cfg,
        &train.utterances,
        &valid.utterances,
        &test.utterances,
        seeds,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_toggle_flags() {
        let base = ModelConfig::default();
        let v = ablation_variants(&base);
        let flags: Vec<_> = v.iter().map(|v| (v.name.as_str(), v.model.use_csa, v.model.use_cca)).collect();
        assert_eq!(flags, [("full", true, true), ("csa_only", true, false), ("cca_only", false, true)]);
        let s = single_channel_variant(&base).model;
        assert_eq!((s.channels, s.use_cca), (1, false));
        assert!(s.validate().is_ok());
    }

    #[test]
    fn csv_layout() {
        let rep = AblationReport {
            reference: "full".into(),
            rows: vec![
                AblationRow { variant: "full".into(), seed: 1, wer: 0.2, werr_vs_full: Some(0.0) },
                AblationRow { variant: "cca_only".into(), seed: 1, wer: 0.25, werr_vs_full: Some(-0.25) },
            ],
            summary: vec![VariantSummary { variant: "full".into(), mean_wer: 0.2, werr_vs_full: Some(0.0) }],
        };
        let csv = rep.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "variant,seed,wer,werr_vs_full");
        assert_eq!(lines[2], "cca_only,1,0.250000,-0.250000");
        assert_eq!(lines[3], "full,mean,0.200000,0.000000");
    }
}
