//! Log-magnitude and phase features from a Hann-windowed STFT.
//!
//! Magnitude frames are stacked with `stack_left` frames of left context
//! (zeros before the first frame) and every `downsample`-th stacked frame is
//! kept. Phase features are `[sin θ, cos θ]` for every bin of the kept
//! (centre) frame only.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::ms_to_samples;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub stack_left: usize,
    pub downsample: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_ms: 16.0,
            hop_ms: 10.0,
            fft_size: 128,
            stack_left: 2,
            downsample: 3,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.fft_size == 0 {
            return Err(Error::Config("features.fft_size must be positive".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("features.downsample must be positive".into()));
        }
        let (w, h) = (self.frame_len(sample_rate), self.hop_len(sample_rate));
        if w == 0 || h == 0 {
            return Err(Error::Config("frame and hop must be at least one sample".into()));
        }
        if w > self.fft_size {
            return Err(Error::Config(format!(
                "frame of {w} samples does not fit fft_size {}",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.frame_ms, sample_rate)
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.hop_ms, sample_rate)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn mag_dim(&self) -> usize {
        (self.stack_left + 1) * self.bins()
    }

    pub fn pha_dim(&self) -> usize {
        2 * self.bins()
    }

    /// Frames after downsampling for a signal of `n` samples.
    pub fn num_frames(&self, n: usize, sample_rate: u32) -> usize {
        raw_frames(n, self.frame_len(sample_rate), self.hop_len(sample_rate))
            .div_ceil(self.downsample)
    }
}

/// `1 + floor((n - w) / h)`, or zero when the signal is shorter than a frame.
pub fn raw_frames(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        1 + (n - window) / hop
    }
}

/// Features of one channel of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeatures {
    pub utterance_id: String,
    /// T × mag_dim log power.
    pub mag: Tensor,
    /// T × pha_dim, sines of all bins followed by cosines.
    pub pha: Tensor,
}

impl ChannelFeatures {
    pub fn num_frames(&self) -> usize {
        self.mag.rows()
    }
}

/// Per-dimension mean and standard deviation of magnitude features.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as this value.
pub const STD_FLOOR: f64 = 1e-6;

impl FeatureStats {
    /// Statistics over every frame of every matrix.
    pub fn from_frames<'a>(mats: impl IntoIterator<Item = &'a Tensor>) -> Option<Self> {
        let mut acc = StatsAccumulator::default();
        mats.into_iter().for_each(|m| acc.add(m));
        acc.finish()
    }

    /// Normalises magnitude features in place; phase is left alone.
    pub fn apply(&self, f: &mut ChannelFeatures) -> Result<()> {
        let cols = f.mag.cols();
        if cols != self.mean.len() {
            return Err(Error::shape("feature stats", &[cols], &[self.mean.len()]));
        }
        for row in f.mag.data_mut().chunks_mut(cols) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

/// Streaming per-dimension sums for [`FeatureStats`].
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    sum: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
}

impl StatsAccumulator {
    pub fn add(&mut self, m: &Tensor) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; m.cols()];
            self.sq = vec![0.0; m.cols()];
        }
        for r in 0..m.rows() {
            for ((s, q), &v) in self.sum.iter_mut().zip(self.sq.iter_mut()).zip(m.row(r)) {
                *s += v;
                *q += v * v;
            }
        }
        self.n += m.rows();
    }

    pub fn finish(&self) -> Option<FeatureStats> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Some(FeatureStats { mean, std })
    }
}

/// Reusable STFT front end for a fixed configuration.
pub struct Featurizer {
    cfg: FeatureConfig,
    sample_rate: u32,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Featurizer {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let w = cfg.frame_len(sample_rate);
        let window = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Featurizer {
            cfg: cfg.clone(),
            sample_rate,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Per-frame log power and phase angle of every one-sided bin.
    fn frames(&self, wave: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let w = self.window.len();
        let hop = self.cfg.hop_len(self.sample_rate);
        let n_frames = raw_frames(wave.len(), w, hop);
        if n_frames == 0 {
            return Err(Error::Input(format!(
                "signal of {} samples is shorter than one {w}-sample frame",
                wave.len()
            )));
        }
        let bins = self.cfg.bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut logpow = Vec::with_capacity(n_frames);
        let mut angle = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f * hop;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < w {
                    Complex::new(wave[start + k] * self.window[k], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            logpow.push(buf[..bins].iter().map(|z| (z.norm_sqr() + MAG_FLOOR).ln()).collect());
            // zero coefficients get angle 0 regardless of signed zeros
            angle.push(
                buf[..bins]
                    .iter()
                    .map(|z| if z.norm_sqr() == 0.0 { 0.0 } else { z.im.atan2(z.re) })
                    .collect(),
            );
        }
        Ok((logpow, angle))
    }

    pub fn extract(&self, wave: &[f64], utterance_id: &str) -> Result<ChannelFeatures> {
        let (logpow, angle) = self.frames(wave)?;
        let bins = self.cfg.bins();
        let ctx = self.cfg.stack_left;
        let kept: Vec<usize> = (0..logpow.len()).step_by(self.cfg.downsample).collect();

        let mag_dim = self.cfg.mag_dim();
        let mut mag = Vec::with_capacity(kept.len() * mag_dim);
        let mut pha = Vec::with_capacity(kept.len() * 2 * bins);
        for &t in &kept {
            for back in (0..=ctx).rev() {
                match t.checked_sub(back) {
                    Some(src) => mag.extend_from_slice(&logpow[src]),
                    None => mag.extend(std::iter::repeat_n(0.0, bins)),
                }
            }
            pha.extend(angle[t].iter().map(|a| a.sin()));
            pha.extend(angle[t].iter().map(|a| a.cos()));
        }
        Ok(ChannelFeatures {
            utterance_id: utterance_id.to_string(),
            mag: Tensor::new(&[kept.len(), mag_dim], mag)?,
            pha: Tensor::new(&[kept.len(), 2 * bins], pha)?,
        })
    }
}

/// One-shot convenience wrapper around [`Featurizer`].
pub fn stft_features(
    wave: &[f64],
    cfg: &FeatureConfig,
    sample_rate: u32,
    utterance_id: &str,
) -> Result<ChannelFeatures> {
    Featurizer::new(cfg, sample_rate)?.extract(wave, utterance_id)
}
