//! Word error rate scoring and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::audio::{BOS, EOS, PAD};
use crate::config::EvalConfig;
use crate::dataset::Utterance;
use crate::decode::{beam_decode, greedy_decode, ModelScorer};
use crate::error::{Error, Result};
use crate::model::Model;

/// Edit counts from one Levenshtein alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimum-cost alignments the backtrace prefers a match or
/// substitution, then a deletion, then an insertion.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::Input("reference is empty".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    Ok(counts)
}

/// Relative WER reduction of system A over baseline B: `(B - A) / B`.
pub fn werr(wer_a: f64, wer_b: f64) -> Result<f64> {
    if wer_b <= 0.0 || !wer_b.is_finite() {
        return Err(Error::Input(format!("baseline WER must be positive, got {wer_b}")));
    }
    Ok(1.0 - wer_a / wer_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub utterance_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: EditCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub wer: f64,
    pub werr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub ref_tokens: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub utterances: Vec<UtteranceResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<Baseline>,
}

impl EvalReport {
    pub fn from_results(utterances: Vec<UtteranceResult>) -> Result<Self> {
        let mut total = EditCounts::default();
        for u in &utterances {
            total.substitutions += u.edits.substitutions;
            total.deletions += u.edits.deletions;
            total.insertions += u.edits.insertions;
            total.ref_len += u.edits.ref_len;
        }
        if total.ref_len == 0 {
            return Err(Error::Input("no reference tokens to score".into()));
        }
        Ok(EvalReport {
            wer: total.wer(),
            ref_tokens: total.ref_len,
            substitutions: total.substitutions,
            deletions: total.deletions,
            insertions: total.insertions,
            utterances,
            baseline: None,
        })
    }

    pub fn with_baseline(mut self, name: &str, baseline: &EvalReport) -> Result<Self> {
        self.baseline = Some(Baseline {
            name: name.to_string(),
            wer: baseline.wer,
            werr: werr(self.wer, baseline.wer)?,
        });
        Ok(self)
    }
}

/// Strips framing tokens from a decoded hypothesis.
fn words_only(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != BOS && t != EOS && t != PAD).collect()
}

/// Decodes every utterance (greedy when `beam == 1`) and scores it.
pub fn evaluate(model: &Model, utterances: &[Utterance], cfg: &EvalConfig) -> Result<EvalReport> {
    let results = utterances
        .iter()
        .map(|utt| {
            let scorer = ModelScorer::new(model, utt)?;
            let hyp = if cfg.beam <= 1 {
                greedy_decode(&scorer, cfg.max_len)?
            } else {
                beam_decode(&scorer, cfg.beam, cfg.max_len, cfg.length_norm)?
            };
            let ids = utt.tokens.ids();
            let reference = ids[1..ids.len() - 1].to_vec();
            let hypothesis = words_only(&hyp.tokens);
            let edits = wer(&reference, &hypothesis)?;
            Ok(UtteranceResult {
                utterance_id: utt.id.clone(),
                reference,
                hypothesis,
                edits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_results(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over every alignment path; returns the minimum
    /// total edit count.
    fn brute_distance(r: &[u8], h: &[u8]) -> usize {
        match (r, h) {
            ([], _) => h.len(),
            (_, []) => r.len(),
            ([a, rs @ ..], [b, hs @ ..]) => {
                let diag = brute_distance(rs, hs) + usize::from(a != b);
                let del = brute_distance(rs, h) + 1;
                let ins = brute_distance(r, hs) + 1;
                diag.min(del).min(ins)
            }
        }
    }

    #[test]
    fn identical_sequences() {
        let c = wer(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions, c.wer()), (0, 0, 0, 0.0));
    }

    #[test]
    fn single_deletion() {
        let c = wer(&['a', 'b', 'c'], &['a', 'c']).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 0));
        assert!((c.wer() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn insertions_and_substitutions() {
        let c = wer(&[1], &[2, 3]).unwrap();
        assert_eq!(c.errors(), 2);
        let c = wer(&[1, 2], &[]).unwrap();
        assert_eq!((c.deletions, c.wer()), (2, 1.0));
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(matches!(wer::<u8>(&[], &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn werr_cases() {
        assert_eq!(werr(0.2, 0.2).unwrap(), 0.0);
        assert_eq!(werr(0.0, 0.3).unwrap(), 1.0);
        assert!(werr(0.1, 0.0).is_err());
        let w = 0.25;
        let mct = w * (1.0 - 0.1121);
        assert!((werr(mct, w).unwrap() - 0.1121).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates() {
        let mk = |r: Vec<usize>, h: Vec<usize>| UtteranceResult {
            utterance_id: "u".into(),
            edits: wer(&r, &h).unwrap(),
            reference: r,
            hypothesis: h,
        };
        let rep = EvalReport::from_results(vec![mk(vec![3, 4], vec![3, 4]), mk(vec![5, 6], vec![6])])
            .unwrap();
        assert_eq!(rep.ref_tokens, 4);
        assert_eq!(rep.wer, 0.25);
        let base = EvalReport { wer: 0.5, ..rep.clone() };
        let rep = rep.with_baseline("sct", &base).unwrap();
        assert_eq!(rep.baseline.unwrap().werr, 0.5);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            r in proptest::collection::vec(0u8..4, 1..=8),
            h in proptest::collection::vec(0u8..4, 0..=8),
        ) {
            let c = wer(&r, &h).unwrap();
            prop_assert_eq!(c.errors(), brute_distance(&r, &h));
            prop_assert_eq!(c.ref_len + c.insertions - c.deletions, h.len());
        }

        #[test]
        fn relabelling_invariant(
            r in proptest::collection::vec(0u8..5, 1..=8),
            h in proptest::collection::vec(0u8..5, 0..=8),
            shift in 1u8..50,
        ) {
            let map = |s: &[u8]| s.iter().map(|&t| (t.wrapping_mul(7)).wrapping_add(shift)).collect::<Vec<_>>();
            prop_assert_eq!(wer(&r, &h).unwrap(), wer(&map(&r), &map(&h)).unwrap());
        }

        #[test]
        fn werr_identity(a in 0.0f64..2.0, b in 1e-3f64..2.0) {
            prop_assert_eq!(werr(a, b).unwrap(), 1.0 - a / b);
        }
    }
}
