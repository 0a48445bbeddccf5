//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use crate::audio::{BOS, EOS};
use crate::autograd::Graph;
use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::model::{decode_forward, encode_features, Model};
use crate::tensor::Tensor;

/// Next-token log-probabilities for a BOS-initial prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A decoded token sequence, without the leading BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with any trailing EOS removed.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Scores steps with a trained model; the encoder runs once per utterance.
pub struct ModelScorer<'m> {
    model: &'m Model,
    encoded: Vec<Tensor>,
}

impl<'m> ModelScorer<'m> {
    /// Uses the first `C` channels of `utt`, where `C` is the model's channel count.
    pub fn new(model: &'m Model, utt: &Utterance) -> Result<Self> {
        let c = model.config().channels;
        if utt.channels.len() < c {
            return Err(Error::Input(format!(
                "utterance {} has {} channels, model needs {c}",
                utt.id,
                utt.channels.len()
            )));
        }
        let g = Graph::new();
        let p = model.bind(&g);
        let feats: Vec<_> = utt.channels[..c].iter().map(|f| (&f.mag, &f.pha)).collect();
        let encoded = encode_features(&p, &feats, None)?
            .into_iter()
            .map(|v| v.to_tensor())
            .collect();
        Ok(ModelScorer { model, encoded })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.model.bind(&g);
        let enc: Vec<_> = self.encoded.iter().map(|t| g.constant(t.clone())).collect();
        let logits = decode_forward(&p, prefix, &enc, None, None)?;
        let logp = logits.log_softmax_rows()?;
        let logp = logp.value();
        let row = logp.row(logp.rows() - 1).to_vec();
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("decoder produced NaN log-probabilities".into()));
        }
        Ok(row)
    }
}

/// Highest-scoring token, lowest id on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Appends the argmax token until EOS or `max_len` tokens.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be positive".into()));
    }
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefix)?;
        let tok = argmax(&lp);
        log_prob += lp[tok];
        prefix.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: true,
    })
}

/// Descending score, then lexicographically smaller tokens, then shorter.
fn rank(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.score(length_norm)
        .total_cmp(&a.score(length_norm))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

/// Beam search keeping the `beam` best expansions per step.
///
/// Expansions that emit EOS leave the beam and become final candidates;
/// search stops when no live hypotheses remain or after `max_len` steps,
/// at which point surviving hypotheses are final as well. With `beam == 1`
/// this reproduces [`greedy_decode`].
pub fn beam_decode<S: StepScorer + ?Sized>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Input("beam size must be positive".into()));
    }
    if max_len == 0 {
        return Err(Error::Input("max_len must be positive".into()));
    }
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(alive.len() * scorer.vocab_size());
        for hyp in &alive {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = scorer.log_probs(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + l,
                    finished: tok == EOS,
                });
            }
        }
        // expansion is ranked on raw log-probability; normalisation only picks the final answer
        candidates.sort_by(|a, b| rank(a, b, false));
        candidates.truncate(beam);
        alive.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    done.extend(alive.into_iter().map(|mut h| {
        h.finished = true;
        h
    }));
    done.sort_by(|a, b| rank(a, b, length_norm));
    Ok(done.swap_remove(0))
}
