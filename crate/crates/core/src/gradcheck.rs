//! Central finite-difference checks against reverse-mode gradients.

use std::collections::BTreeSet;

use rand::Rng;

use crate::audio::{BOS, EOS, NUM_SPECIAL};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::autograd::concat_cols;
use crate::model::{
    cca_layer, csa_layer, decode_forward, embed_channel, embed_tokens, encode_features, eda_layer, ffn_block,
    loss, msa_layer, Activation, Model, ModelConfig, Params,
};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Denominator floor for relative error, so exact zeros compare sanely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares `d f / d inputs` from backward against central differences with
/// step `h`. `select(input, entry)` picks which entries to perturb.
pub fn check<F, S>(inputs: &[Tensor], f: F, h: f64, select: S) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    S: Fn(usize, usize) -> bool,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&g, &vars)?.scalar_value())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            if !select(i, e) {
                continue;
            }
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite difference at input {i} entry {e}"
                )));
            }
            let err = rel_err(grad.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

/// Checks every entry of every input.
pub fn check_all<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check(inputs, f, h, |_, _| true)
}

/// Like [`check`], but `f` also sees the model's parameters bound to each
/// graph. Slots `0..P` are the model's parameters in store order, slots
/// `P..` are `inputs`.
pub fn check_model<F, S>(model: &Model, inputs: &[Tensor], f: F, h: f64, select: S) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Params<'g>, &[Var<'g>]) -> Result<Var<'g>>,
    S: Fn(usize, usize) -> bool,
{
    let np = model.params().len();
    let analytic: Vec<Option<Tensor>> = {
        let g = Graph::new();
        let p = model.bind(&g);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&p, &vars)?;
        let grads = g.backward(out)?;
        let mut all = vec![None; np];
        for (id, v) in p.bound() {
            all[id.0] = Some(grads.get_or_zeros(v));
        }
        all.extend(vars.iter().map(|v| Some(grads.get_or_zeros(*v))));
        all
    };

    let eval = |m: &Model, inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let p = m.bind(&g);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&p, &vars)?.scalar_value())
    };

    let mut work_model = model.clone();
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for slot in 0..np + inputs.len() {
        let numel = if slot < np {
            model.params().tensors()[slot].numel()
        } else {
            inputs[slot - np].numel()
        };
        // parameters the function never touched are skipped
        if analytic[slot].is_none() {
            continue;
        }
        for e in 0..numel {
            if !select(slot, e) {
                continue;
            }
            let mut probe = |delta: f64| -> Result<f64> {
                if slot < np {
                    let t = &mut work_model.params_mut().tensors_mut()[slot];
                    let orig = model.params().tensors()[slot].data()[e];
                    t.data_mut()[e] = orig + delta;
                    let v = eval(&work_model, &work);
                    work_model.params_mut().tensors_mut()[slot].data_mut()[e] = orig;
                    v
                } else {
                    let orig = inputs[slot - np].data()[e];
                    work[slot - np].data_mut()[e] = orig + delta;
                    let v = eval(&work_model, &work);
                    work[slot - np].data_mut()[e] = orig;
                    v
                }
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference at slot {slot} entry {e}")));
            }
            let a = analytic[slot].as_ref().expect("slot was bound").data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((slot, e));
            }
        }
    }
    Ok(report)
}

/// Random features and a random transcript for a gradient-check toy.
pub fn toy_example(cfg: &ModelConfig, frames: usize, words: usize, seed: u64) -> (Vec<(Tensor, Tensor)>, Vec<usize>) {
    let mut rng = substream(seed, "toy", 0);
    let mut rand_t = |r: usize, c: usize| {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[r, c], data).expect("toy shape")
    };
    let feats = (0..cfg.channels)
        .map(|_| (rand_t(frames, cfg.mag_dim), rand_t(frames, cfg.pha_dim)))
        .collect();
    let mut rng = substream(seed, "toy", 1);
    let mut ids = vec![BOS];
    ids.extend((0..words).map(|_| rng.random_range(NUM_SPECIAL..cfg.vocab_size)));
    ids.push(EOS);
    (feats, ids)
}

/// Teacher-forced training loss of `p` on one toy utterance.
pub fn toy_loss<'g>(p: &Params<'g>, feats: &[(Tensor, Tensor)], ids: &[usize]) -> Result<Var<'g>> {
    let refs: Vec<_> = feats.iter().map(|(m, ph)| (m, ph)).collect();
    let enc = encode_features(p, &refs, None)?;
    let logits = decode_forward(p, &ids[..ids.len() - 1], &enc, None, None)?;
    loss(logits, &ids[1..], p.config().label_smoothing)
}

/// Checks the end-to-end loss gradient on `samples` parameter entries drawn
/// uniformly from the whole store.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    frames: usize,
    words: usize,
    samples: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let model = jittered(cfg, seed)?;
    let sizes: Vec<usize> = model.params().tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut picked = BTreeSet::new();
    let mut rng = substream(seed, "toy", 3);
    while picked.len() < samples.min(total) {
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= sizes[slot] {
            flat -= sizes[slot];
            slot += 1;
        }
        picked.insert((slot, flat));
    }
    let (feats, ids) = toy_example(cfg, frames, words, seed);
    check_model(&model, &[], |p, _| toy_loss(p, &feats, &ids), h, |s, e| picked.contains(&(s, e)))
}

/// The small configuration used by the gradient-check suite.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        channels: 2,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        vocab_size: 6,
        mag_dim: 12,
        pha_dim: 8,
        label_smoothing: 0.1,
        use_csa: true,
        use_cca: true,
        dropout: 0.0,
        qkv_activation: Activation::Relu,
        ln_eps: 1e-5,
    }
}

/// Finite-difference step used throughout the suite.
pub const SUITE_STEP: f64 = 1e-5;

fn random_tensor(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut rng = substream(seed, "suite", tag);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("suite shape")
}

/// Reduces a matrix to a scalar with fixed random weights, so every output
/// entry carries a distinct gradient.
fn project_scalar<'g>(x: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = random_tensor(&x.shape(), seed, 999);
    Ok(x.mul_const(&w)?.sum())
}

/// Fresh model nudged away from its all-ones/all-zeros initial values so
/// every path carries signal.
fn jittered(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = substream(seed, "toy", 2);
    for t in model.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    Ok(model)
}

/// Gradient checks for every layer type and for the full toy model
/// (channels 2, 6 frames, 4 decoder positions). Every touched parameter
/// and input entry is checked.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = toy_config();
    let (t, u, d) = (6, 4, cfg.d_model);
    let model = jittered(&cfg, seed)?;
    let all = |_: usize, _: usize| true;
    let h = SUITE_STEP;
    let mut out = Vec::new();

    let feats = [random_tensor(&[t, cfg.mag_dim], seed, 1), random_tensor(&[t, cfg.pha_dim], seed, 2)];
    out.push((
        "channel_embedding",
        check_model(&model, &feats, |p, v| project_scalar(embed_channel(p, 1, v[0], v[1])?, seed), h, all)?,
    ));

    out.push((
        "token_embedding",
        check_model(&model, &[], |p, _| project_scalar(embed_tokens(p, &[BOS, 4, 4, 5])?, seed), h, all)?,
    ));

    let x = [random_tensor(&[t, d], seed, 3)];
    out.push((
        "csa",
        check_model(&model, &x, |p, v| project_scalar(csa_layer(p, 0, 1, v[0], None)?, seed), h, all)?,
    ));

    let cfg3 = ModelConfig { channels: 3, ..cfg.clone() };
    let model3 = jittered(&cfg3, seed)?;
    let hs: Vec<Tensor> = (0..3).map(|c| random_tensor(&[t, d], seed, 10 + c)).collect();
    out.push((
        "cca",
        check_model(
            &model3,
            &hs,
            |p, v| {
                let outs = (0..3).map(|i| cca_layer(p, 0, i, v, None)).collect::<Result<Vec<_>>>()?;
                project_scalar(concat_cols(&outs)?, seed)
            },
            h,
            all,
        )?,
    ));

    let dec_in = [random_tensor(&[u, d], seed, 20)];
    out.push((
        "masked_self_attention",
        check_model(&model, &dec_in, |p, v| project_scalar(msa_layer(p, 0, v[0], None)?, seed), h, all)?,
    ));

    let eda_in = [random_tensor(&[u, d], seed, 21), random_tensor(&[t, d], seed, 22), random_tensor(&[t, d], seed, 23)];
    out.push((
        "eda",
        check_model(
            &model,
            &eda_in,
            |p, v| project_scalar(eda_layer(p, 1, v[0], &v[1..], None)?, seed),
            h,
            all,
        )?,
    ));

    out.push((
        "ffn",
        check_model(
            &model,
            &x,
            |p, v| project_scalar(ffn_block(p, &p.layout().dec[0].ffn, v[0])?, seed),
            h,
            all,
        )?,
    ));

    let ln_in = [random_tensor(&[3, 8], seed, 30), random_tensor(&[8], seed, 31), random_tensor(&[8], seed, 32)];
    out.push((
        "layernorm",
        check_all(&ln_in, |_, v| project_scalar(v[0].layer_norm(v[1], v[2], 1e-5)?, seed), h)?,
    ));

    let logits = [random_tensor(&[u, cfg.vocab_size], seed, 40)];
    out.push((
        "loss",
        check_all(&logits, |_, v| loss(v[0], &[4, 5, EOS, 0], cfg.label_smoothing), h)?,
    ));

    let (feats, ids) = toy_example(&cfg, t, u - 1, seed);
    out.push((
        "full_model",
        check_model(&model, &[], |p, _| toy_loss(p, &feats, &ids), h, all)?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_all(&[x], |_, v| Ok(v[0].mul(v[0])?.sum()), 1e-5).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // mul_const treats its copy of x as a constant, so backward reports x
        // where the true derivative of x*x is 2x.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let r = check_all(
            &[x],
            |_, v| {
                let c = v[0].to_tensor();
                Ok(v[0].mul_const(&c)?.sum())
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn suite_passes() {
        for (name, r) in layer_suite(7).unwrap() {
            assert!(r.checked > 0, "{name}");
            assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn sampled_model_check() {
        let r = model_gradcheck(&toy_config(), 6, 3, 40, 3, SUITE_STEP).unwrap();
        assert_eq!(r.checked, 40);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
