//! On-disk datasets.
//!
//! A dataset directory holds `meta.json`, one JSON-lines manifest per split
//! (`train.jsonl`, `valid.jsonl`, `test.jsonl`) and a `feats/` directory with
//! one feature file per channel per utterance.
//!
//! Feature files are little-endian: `"MCTF"`, version `u32`, `T u32`,
//! `F_mag u32`, `F_pha u32`, then `T × F_mag` then `T × F_pha` row-major `f32`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{generate_utterance, SceneConfig, TokenSequence};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::features::{ChannelFeatures, FeatureStats, Featurizer, StatsAccumulator};
use crate::binio::Cursor;
use crate::rng::substream;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MCTF";
pub const FEATURE_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// Paths relative to the dataset directory, one per channel.
    pub channel_paths: Vec<String>,
    /// Word-level token ids (vocabulary ids, without BOS/EOS).
    pub transcript: Vec<usize>,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub vocab_size: usize,
    pub mag_dim: usize,
    pub pha_dim: usize,
    pub sample_rate: u32,
    pub counts: [usize; 3],
    /// Train-split magnitude statistics, applied on load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mag_stats: Option<FeatureStats>,
}

pub fn write_features(path: &Path, f: &ChannelFeatures) -> Result<()> {
    let t = f.num_frames();
    let mut buf = Vec::with_capacity(20 + 4 * (f.mag.numel() + f.pha.numel()));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, t as u32, f.mag.cols() as u32, f.pha.cols() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in f.mag.data().iter().chain(f.pha.data()) {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut file| file.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, utterance_id: &str) -> Result<ChannelFeatures> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4) != Some(FEATURE_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        *h = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let [version, t, f_mag, f_pha] = header;
    if version != FEATURE_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let raw = cur.take(n * 4).ok_or_else(|| bad("truncated data"))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let mag = read_block(t * f_mag)?;
    let pha = read_block(t * f_pha)?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ChannelFeatures {
        utterance_id: utterance_id.to_string(),
        mag: Tensor::new(&[t, f_mag], mag)?,
        pha: Tensor::new(&[t, f_pha], pha)?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates, featurises and writes a full dataset under `out`.
pub fn build_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetMeta> {
    cfg.validate()?;
    let scene = &cfg.scene;
    let featurizer = Featurizer::new(&cfg.features, scene.sample_rate)?;
    let feats_dir = out.join("feats");
    std::fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;

    let counts = cfg.data.counts();
    let n = cfg.data.utterances;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(cfg.seed, "split", 0));

    let mut offset = 0;
    let mut stats = StatsAccumulator::default();
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let mut indices = order[offset..offset + count].to_vec();
        indices.sort_unstable();
        offset += count;
        let mut manifest = String::new();
        for index in indices {
            let acc = (*split == "train").then_some(&mut stats);
            let entry = write_utterance(cfg.seed, scene, &featurizer, index, out, acc)?;
            manifest.push_str(&serde_json::to_string(&entry).expect("entry serialises"));
            manifest.push('\n');
        }
        write_text(&out.join(format!("{split}.jsonl")), &manifest)?;
    }

    let meta = DatasetMeta {
        channels: scene.channels,
        vocab_size: scene.model_vocab(),
        mag_dim: cfg.features.mag_dim(),
        pha_dim: cfg.features.pha_dim(),
        sample_rate: scene.sample_rate,
        counts,
        mag_stats: if cfg.data.normalize { stats.finish() } else { None },
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serialises");
    write_text(&out.join("meta.json"), &meta_json)?;
    Ok(meta)
}

fn write_utterance(
    seed: u64,
    scene: &SceneConfig,
    featurizer: &Featurizer,
    index: usize,
    out: &Path,
    stats: Option<&mut StatsAccumulator>,
) -> Result<ManifestEntry> {
    let id = format!("utt{index:06}");
    let (waves, tokens) = generate_utterance(scene, &mut substream(seed, "data", index as u64))?;
    let mut channel_paths = Vec::with_capacity(waves.len());
    let mut num_frames = 0;
    let mut stats = stats;
    for (c, wave) in waves.iter().enumerate() {
        let feats = featurizer.extract(wave, &id)?;
        num_frames = feats.num_frames();
        let rel = format!("feats/{id}.ch{c}.mctf");
        write_features(&out.join(&rel), &feats)?;
        if let Some(acc) = stats.as_deref_mut() {
            // statistics see exactly the stored (f32) values
            let stored: Vec<f64> = feats.mag.data().iter().map(|&v| v as f32 as f64).collect();
            acc.add(&Tensor::new(feats.mag.shape(), stored)?);
        }
        channel_paths.push(rel);
    }
    Ok(ManifestEntry {
        utterance_id: id,
        channel_paths,
        transcript: tokens.ids()[1..tokens.len() - 1].to_vec(),
        num_frames,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// One utterance held in memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub channels: Vec<ChannelFeatures>,
    pub tokens: TokenSequence,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.channels[0].num_frames()
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Utterance> {
        let picked = channels
            .iter()
            .map(|&c| {
                self.channels.get(c).cloned().ok_or(Error::Index {
                    index: c,
                    size: self.channels.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Utterance {
            id: self.id.clone(),
            channels: picked,
            tokens: self.tokens.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
        let path = dir.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            msg: e.to_string(),
        })
    }

    /// Loads one split fully into memory.
    pub fn load(dir: &Path, split: &str) -> Result<Dataset> {
        let meta = Self::read_meta(dir)?;
        let entries = read_manifest(&dir.join(format!("{split}.jsonl")))?;
        let mut utterances = Vec::with_capacity(entries.len());
        for e in entries {
            let mut channels = e
                .channel_paths
                .iter()
                .map(|p| {
                    read_features(&dir.join(p), &e.utterance_id).map_err(|err| match err {
                        Error::Io { path, source } => Error::Io {
                            path,
                            source: std::io::Error::new(
                                source.kind(),
                                format!("utterance {}: {source}", e.utterance_id),
                            ),
                        },
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(stats) = &meta.mag_stats {
                for f in &mut channels {
                    stats.apply(f)?;
                }
            }
            let mut ids = vec![crate::audio::BOS];
            ids.extend(&e.transcript);
            ids.push(crate::audio::EOS);
            let tokens = TokenSequence::from_ids(ids, meta.vocab_size)?;
            utterances.push(Utterance {
                id: e.utterance_id,
                channels,
                tokens,
            });
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            meta,
            utterances,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}
