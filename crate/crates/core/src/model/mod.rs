//! The multi-channel transformer: per-channel embeddings, an encoder of
//! channel-wise self attention (CSA) and cross-channel attention (CCA)
//! layers, and a decoder whose encoder-decoder attention (EDA) reads the
//! channel-averaged encoder output.

mod layers;
mod params;
#[cfg(test)]
mod tests;

use std::cell::RefCell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use layers::*;
pub use params::{read_checkpoint, Init, ParamId, ParamSpec, ParameterStore};
pub use params::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Output vocabulary including PAD/BOS/EOS.
    pub vocab_size: usize,
    pub mag_dim: usize,
    pub pha_dim: usize,
    pub label_smoothing: f64,
    pub use_csa: bool,
    pub use_cca: bool,
    pub dropout: f64,
    pub qkv_activation: Activation,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: 15,
            mag_dim: 195,
            pha_dim: 130,
            label_smoothing: 0.1,
            use_csa: true,
            use_cca: true,
            dropout: 0.0,
            qkv_activation: Activation::Relu,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return err("model.channels must be >= 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "model.heads = {} must divide d_model = {}",
                self.heads, self.d_model
            ));
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return err("model.d_model must be even".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.d_ff == 0 {
            return err("model layer counts and d_ff must be >= 1".into());
        }
        if self.vocab_size < 4 || self.mag_dim == 0 || self.pha_dim == 0 {
            return err("model.vocab_size must be >= 4 and feature dims positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err("model.label_smoothing must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("model.dropout must lie in [0, 1)".into());
        }
        if !self.use_csa && !self.use_cca {
            return err("at least one of model.use_csa / model.use_cca must be set".into());
        }
        if self.use_cca && self.channels < 2 {
            return err("cross-channel attention needs at least 2 channels".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Closed-form parameter count per block, independent of the allocator.
pub fn parameter_breakdown(cfg: &ModelConfig) -> Vec<(&'static str, usize)> {
    let d = cfg.d_model;
    let half = d / 2;
    let c = cfg.channels;
    let l = cfg.vocab_size;
    let ln = 2 * d;
    // shared W_q/W_k/W_v, `bias_sets` bias triples, output projection, layer norm
    let attn = |bias_sets: usize| 3 * d * d + 3 * d * bias_sets + d * d + d + ln;
    let ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d + ln;

    let channel_embed = c * (cfg.mag_dim * half + half + cfg.pha_dim * half + half + d * d + d);
    let token_embed = l * d + d;
    let mut enc_layer = 0;
    if cfg.use_csa {
        enc_layer += attn(c) + ffn;
    }
    if cfg.use_cca {
        enc_layer += attn(c) + ffn + c * d;
    }
    let dec_layer = 2 * attn(1) + ffn;
    vec![
        ("channel_embedding", channel_embed),
        ("token_embedding", token_embed),
        ("encoder", cfg.enc_layers * enc_layer),
        ("decoder", cfg.dec_layers * dec_layer),
        ("output_projection", d * l + l),
    ]
}

pub fn count_parameters(cfg: &ModelConfig) -> usize {
    parameter_breakdown(cfg).iter().map(|(_, n)| n).sum()
}

#[derive(Debug, Clone)]
pub(crate) struct ChannelEmbedIds {
    pub mag_w: ParamId,
    pub mag_b: ParamId,
    pub pha_w: ParamId,
    pub pha_b: ParamId,
    pub joint_w: ParamId,
    pub joint_b: ParamId,
}

/// Query/key/value projections with one bias triple per channel (or one shared).
#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub w: [ParamId; 3],
    pub b: Vec<[ParamId; 3]>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

impl AttnIds {
    pub fn bias(&self, channel: usize) -> [ParamId; 3] {
        if self.b.len() == 1 {
            self.b[0]
        } else {
            self.b[channel]
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct CcaIds {
    pub attn: AttnIds,
    pub ffn: FfnIds,
    /// Mixing vector A_j for each source channel j.
    pub mix: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayerIds {
    pub csa: Option<(AttnIds, FfnIds)>,
    pub cca: Option<CcaIds>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerIds {
    pub msa: AttnIds,
    pub eda: AttnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: Vec<ChannelEmbedIds>,
    pub tok_w: ParamId,
    pub tok_b: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    fn attn(&mut self, prefix: &str, d: usize, bias_sets: usize) -> AttnIds {
        let w = ["q", "k", "v"].map(|n| self.add(format!("{prefix}.{n}.w"), &[d, d], Init::Glorot));
        let b = (0..bias_sets)
            .map(|c| {
                ["q", "k", "v"].map(|n| {
                    let name = if bias_sets == 1 {
                        format!("{prefix}.{n}.b")
                    } else {
                        format!("{prefix}.{n}.b.ch{c}")
                    };
                    self.add(name, &[d], Init::Zeros)
                })
            })
            .collect();
        AttnIds {
            w,
            b,
            out_w: self.add(format!("{prefix}.out.w"), &[d, d], Init::Glorot),
            out_b: self.add(format!("{prefix}.out.b"), &[d], Init::Zeros),
            ln_g: self.add(format!("{prefix}.ln.g"), &[d], Init::Ones),
            ln_b: self.add(format!("{prefix}.ln.b"), &[d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.ffn.w1"), &[d, d_ff], Init::Glorot),
            b1: self.add(format!("{prefix}.ffn.b1"), &[d_ff], Init::Zeros),
            w2: self.add(format!("{prefix}.ffn.w2"), &[d_ff, d], Init::Glorot),
            b2: self.add(format!("{prefix}.ffn.b2"), &[d], Init::Zeros),
            ln_g: self.add(format!("{prefix}.ffn.ln.g"), &[d], Init::Ones),
            ln_b: self.add(format!("{prefix}.ffn.ln.b"), &[d], Init::Zeros),
        }
    }
}

/// Parameter specs and their structural layout, a pure function of the config.
pub(crate) fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    let d = cfg.d_model;
    let half = d / 2;
    let c = cfg.channels;
    let mut b = LayoutBuilder { specs: Vec::new() };

    let embed = (0..c)
        .map(|i| ChannelEmbedIds {
            mag_w: b.add(format!("embed.ch{i}.mag.w"), &[cfg.mag_dim, half], Init::Glorot),
            mag_b: b.add(format!("embed.ch{i}.mag.b"), &[half], Init::Zeros),
            pha_w: b.add(format!("embed.ch{i}.pha.w"), &[cfg.pha_dim, half], Init::Glorot),
            pha_b: b.add(format!("embed.ch{i}.pha.b"), &[half], Init::Zeros),
            joint_w: b.add(format!("embed.ch{i}.joint.w"), &[d, d], Init::Glorot),
            joint_b: b.add(format!("embed.ch{i}.joint.b"), &[d], Init::Zeros),
        })
        .collect();
    let tok_w = b.add("tok.w".into(), &[cfg.vocab_size, d], Init::Glorot);
    let tok_b = b.add("tok.b".into(), &[d], Init::Zeros);

    let enc = (0..cfg.enc_layers)
        .map(|l| {
            let csa = cfg.use_csa.then(|| {
                let p = format!("enc{l}.csa");
                (b.attn(&p, d, c), b.ffn(&p, d, cfg.d_ff))
            });
            let cca = cfg.use_cca.then(|| {
                let p = format!("enc{l}.cca");
                let attn = b.attn(&p, d, c);
                let ffn = b.ffn(&p, d, cfg.d_ff);
                let mix = (0..c)
                    .map(|j| b.add(format!("{p}.mix.ch{j}"), &[d], Init::Ones))
                    .collect();
                CcaIds { attn, ffn, mix }
            });
            EncLayerIds { csa, cca }
        })
        .collect();

    let dec = (0..cfg.dec_layers)
        .map(|l| DecLayerIds {
            msa: b.attn(&format!("dec{l}.msa"), d, 1),
            eda: b.attn(&format!("dec{l}.eda"), d, 1),
            ffn: b.ffn(&format!("dec{l}.eda"), d, cfg.d_ff),
        })
        .collect();

    // small logits at init, so training starts from near-uniform predictions
    let out_w = b.add("out.w".into(), &[d, cfg.vocab_size], Init::ScaledGlorot(OUTPUT_INIT_GAIN));
    let out_b = b.add("out.b".into(), &[cfg.vocab_size], Init::Zeros);

    let layout = Layout {
        embed,
        tok_w,
        tok_b,
        enc,
        dec,
        out_w,
        out_b,
    };
    (b.specs, layout)
}

/// Gain on the output projection's Glorot limit.
pub const OUTPUT_INIT_GAIN: f64 = 0.5;

/// Names and shapes of every parameter implied by `cfg`.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    build_layout(cfg).0
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    pub(crate) layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = build_layout(&config);
        let params = ParameterStore::init(&specs, rng);
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Makes parameters available on `graph`; each one becomes a leaf on first use.
    pub fn bind<'g>(&'g self, graph: &'g Graph) -> Params<'g> {
        Params {
            model: self,
            graph,
            source: Source::Store(RefCell::new(vec![None; self.params.len()])),
            dropout: None,
        }
    }

    /// Binds caller-supplied leaves, one per parameter in store order.
    pub fn bind_vars<'g>(&'g self, vars: Vec<Var<'g>>) -> Result<Params<'g>> {
        if vars.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let graph = vars
            .first()
            .map(|v| v.graph())
            .ok_or_else(|| Error::Input("model has no parameters".into()))?;
        Ok(Params {
            model: self,
            graph,
            source: Source::Vars(vars),
            dropout: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.config).expect("config serialises");
        self.params.write_checkpoint(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, tensors) = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&json).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("config: {e}"),
        })?;
        let mut model = Model::new(config, 0)?;
        model.params.assign(tensors)?;
        Ok(model)
    }
}

enum Source<'g> {
    Store(RefCell<Vec<Option<Var<'g>>>>),
    Vars(Vec<Var<'g>>),
}

/// A model's parameters bound to one graph.
pub struct Params<'g> {
    model: &'g Model,
    graph: &'g Graph,
    source: Source<'g>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'g> Params<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &'g ModelConfig {
        &self.model.config
    }

    pub(crate) fn layout(&self) -> &'g Layout {
        &self.model.layout
    }

    pub fn get(&self, id: ParamId) -> Var<'g> {
        match &self.source {
            Source::Vars(v) => v[id.0],
            Source::Store(cache) => {
                let mut cache = cache.borrow_mut();
                *cache[id.0].get_or_insert_with(|| self.graph.leaf(self.model.params.get(id).clone()))
            }
        }
    }

    /// Leaves created so far, paired with their parameter ids.
    pub fn bound(&self) -> Vec<(ParamId, Var<'g>)> {
        match &self.source {
            Source::Vars(v) => v.iter().enumerate().map(|(i, v)| (ParamId(i), *v)).collect(),
            Source::Store(cache) => cache
                .borrow()
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
                .collect(),
        }
    }

    /// Enables inverted dropout with the model's rate, drawing masks from `seed`.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        let p = self.model.config.dropout;
        if p > 0.0 {
            self.dropout = Some((p, RefCell::new(ChaCha8Rng::seed_from_u64(seed))));
        }
        self
    }

    pub(crate) fn dropout(&self, x: Var<'g>) -> Result<Var<'g>> {
        let Some((p, rng)) = &self.dropout else {
            return Ok(x);
        };
        let shape = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let numel: usize = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
            .collect();
        x.mul_const(&Tensor::new(&shape, mask)?)
    }
}
