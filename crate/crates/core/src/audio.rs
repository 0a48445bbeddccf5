//! Synthetic multi-microphone scenes.
//!
//! Each word token is rendered as a tone at its own frequency, separated by
//! short silences. Every channel hears the same clean signal delayed by an
//! integer number of samples, scaled by a gain, plus its own Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids in front of the word ids.
pub const NUM_SPECIAL: usize = 3;

/// Full vocabulary size for `words` word tokens.
pub fn vocab_size(words: usize) -> usize {
    words + NUM_SPECIAL
}

/// Token ids framed by BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn from_words(words: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| w + NUM_SPECIAL));
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Wraps a full id list, checking framing and range.
    pub fn from_ids(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::Input(format!("token sequence {ids:?} is not BOS..EOS framed")));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index { index: bad, size: vocab });
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Word ids without framing or offset.
    pub fn words(&self) -> Vec<usize> {
        self.ids[1..self.ids.len() - 1]
            .iter()
            .map(|id| id - NUM_SPECIAL)
            .collect()
    }

    /// Teacher-forcing decoder input: BOS followed by the words.
    pub fn decoder_input(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Loss targets: the words followed by EOS.
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub channels: usize,
    pub sample_rate: u32,
    /// Per-channel integer delay in samples.
    pub delays: Vec<usize>,
    pub gains: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Number of word tokens (excluding PAD/BOS/EOS).
    pub vocab_size: usize,
    pub tone_ms: f64,
    pub gap_ms: f64,
    pub tone_base_hz: f64,
    pub tone_spacing_hz: f64,
    pub amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            channels: 2,
            sample_rate: 8000,
            delays: vec![0, 3],
            gains: vec![1.0, 0.9],
            noise_std: vec![3.5, 3.5],
            min_tokens: 2,
            max_tokens: 5,
            vocab_size: 12,
            tone_ms: 120.0,
            gap_ms: 40.0,
            tone_base_hz: 375.0,
            tone_spacing_hz: 250.0,
            amplitude: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 {
            return Err(Error::Config("scene.channels must be >= 1".into()));
        }
        for (name, len) in [
            ("delays", self.delays.len()),
            ("gains", self.gains.len()),
            ("noise_std", self.noise_std.len()),
        ] {
            if len != c {
                return Err(Error::Config(format!(
                    "scene.{name} has {len} entries for {c} channels"
                )));
            }
        }
        if let Some(g) = self.gains.iter().find(|g| !(**g > 0.0 && **g <= 1.5)) {
            return Err(Error::Config(format!("scene.gains entry {g} outside (0, 1.5]")));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("scene.noise_std entries must be >= 0".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("scene token range must satisfy 1 <= min <= max".into()));
        }
        if self.vocab_size == 0 || self.sample_rate == 0 || self.tone_ms <= 0.0 || self.gap_ms < 0.0
        {
            return Err(Error::Config("scene sizes and durations must be positive".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = self.token_frequency(self.vocab_size - 1);
        if self.tone_base_hz <= 0.0 || self.tone_spacing_hz <= 0.0 || top >= nyquist {
            return Err(Error::Config(format!(
                "vocabulary of {} tones reaches {top} Hz, not below Nyquist {nyquist} Hz",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn token_frequency(&self, word: usize) -> f64 {
        self.tone_base_hz + word as f64 * self.tone_spacing_hz
    }

    pub fn tone_samples(&self) -> usize {
        ms_to_samples(self.tone_ms, self.sample_rate)
    }

    pub fn gap_samples(&self) -> usize {
        ms_to_samples(self.gap_ms, self.sample_rate)
    }

    /// Full vocabulary size including the special tokens.
    pub fn model_vocab(&self) -> usize {
        vocab_size(self.vocab_size)
    }
}

pub(crate) fn ms_to_samples(ms: f64, rate: u32) -> usize {
    (ms * rate as f64 / 1000.0).round() as usize
}

/// Clean signal for a word sequence: tones separated by silent gaps.
pub fn render_words(cfg: &SceneConfig, words: &[usize], phases: &[f64]) -> Vec<f64> {
    let tone = cfg.tone_samples();
    let gap = cfg.gap_samples();
    let rate = cfg.sample_rate as f64;
    let mut out = Vec::with_capacity(words.len() * (tone + gap));
    for (k, (&w, &phase)) in words.iter().zip(phases).enumerate() {
        if k > 0 {
            out.extend(std::iter::repeat_n(0.0, gap));
        }
        let omega = 2.0 * std::f64::consts::PI * cfg.token_frequency(w) / rate;
        out.extend((0..tone).map(|n| cfg.amplitude * (omega * n as f64 + phase).sin()));
    }
    out
}

/// Draws one utterance: a transcript and one waveform per channel.
pub fn generate_utterance<R: Rng>(
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, TokenSequence)> {
    cfg.validate()?;
    let n = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let phases: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let clean = render_words(cfg, &words, &phases);

    let mut waves = Vec::with_capacity(cfg.channels);
    for c in 0..cfg.channels {
        let delay = cfg.delays[c];
        let gain = cfg.gains[c];
        let mut wave: Vec<f64> = (0..clean.len())
            .map(|t| if t >= delay { gain * clean[t - delay] } else { 0.0 })
            .collect();
        let std = cfg.noise_std[c];
        if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            for v in wave.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        waves.push(wave);
    }
    Ok((waves, TokenSequence::from_words(&words)))
}
