use crate::audio::PAD;
use crate::autograd::{add_n, concat_cols, embedding_lookup, mean_over, merge_heads, AttnMask, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Activation, AttnIds, FfnIds, Params};

/// Sinusoidal position table: even columns `sin(t / 10000^(2k/d))`, odd columns `cos`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for k in 0..d.div_ceil(2) {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[t * d + 2 * k] = angle.sin();
            if 2 * k + 1 < d {
                data[t * d + 2 * k + 1] = angle.cos();
            }
        }
    }
    Tensor::new(&[len, d], data).expect("pe shape")
}

fn activate(x: Var<'_>, act: Activation) -> Var<'_> {
    match act {
        Activation::Relu => x.relu(),
        Activation::Identity => x,
    }
}

/// `act(x · W + 1 bᵀ)`
fn project<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>, act: Activation) -> Result<Var<'g>> {
    Ok(activate(x.matmul(w)?.add_row(b)?, act))
}

/// Per-head attention weights `softmax(Q_h K_hᵀ / √d_k)`.
pub fn attention_weights<'g>(
    q: Var<'g>,
    k: Var<'g>,
    heads: usize,
    mask: Option<AttnMask>,
) -> Result<Vec<Var<'g>>> {
    let (qs, ks) = (q.split_heads(heads)?, k.split_heads(heads)?);
    let scale = 1.0 / (qs[0].cols() as f64).sqrt();
    if let Some(m) = mask {
        if m.causal && q.rows() != k.rows() {
            return Err(Error::shape("causal mask", &q.shape(), &k.shape()));
        }
    }
    qs.into_iter()
        .zip(ks)
        .map(|(qh, kh)| qh.matmul_t(kh)?.scale(scale).softmax_rows_masked(mask))
        .collect()
}

/// Multi-head scaled dot-product attention; returns the concatenated heads
/// before any output projection.
pub fn mh_sdpa<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    heads: usize,
    mask: Option<AttnMask>,
) -> Result<Var<'g>> {
    if k.rows() != v.rows() {
        return Err(Error::shape("mh_sdpa keys/values", &k.shape(), &v.shape()));
    }
    let weights = attention_weights(q, k, heads, mask)?;
    let vs = v.split_heads(heads)?;
    let outs = weights
        .into_iter()
        .zip(vs)
        .map(|(a, vh)| a.matmul(vh))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outs)
}

/// Queries, keys and values `act(x W + 1 bᵀ)` for one attention block.
fn qkv<'g>(
    p: &Params<'g>,
    ids: &AttnIds,
    channel: usize,
    q_in: Var<'g>,
    kv_in: Var<'g>,
) -> Result<[Var<'g>; 3]> {
    let act = p.config().qkv_activation;
    let b = ids.bias(channel);
    Ok([
        project(q_in, p.get(ids.w[0]), p.get(b[0]), act)?,
        project(kv_in, p.get(ids.w[1]), p.get(b[1]), act)?,
        project(kv_in, p.get(ids.w[2]), p.get(b[2]), act)?,
    ])
}

/// Attention over precomputed Q/K/V, output projection, then `LN(residual + ·)`.
fn attend_and_norm<'g>(
    p: &Params<'g>,
    ids: &AttnIds,
    [q, k, v]: [Var<'g>; 3],
    residual: Var<'g>,
    mask: Option<AttnMask>,
) -> Result<Var<'g>> {
    let h = mh_sdpa(q, k, v, p.config().heads, mask)?;
    let h = h.matmul(p.get(ids.out_w))?.add_row(p.get(ids.out_b))?;
    let h = p.dropout(h)?;
    residual
        .add(h)?
        .layer_norm(p.get(ids.ln_g), p.get(ids.ln_b), p.config().ln_eps)
}

/// Position-wise `LN(x + W2 relu(W1 x))`.
pub(crate) fn ffn_block<'g>(p: &Params<'g>, ids: &FfnIds, x: Var<'g>) -> Result<Var<'g>> {
    let h = x.matmul(p.get(ids.w1))?.add_row(p.get(ids.b1))?.relu();
    let h = h.matmul(p.get(ids.w2))?.add_row(p.get(ids.b2))?;
    let h = p.dropout(h)?;
    x.add(h)?
        .layer_norm(p.get(ids.ln_g), p.get(ids.ln_b), p.config().ln_eps)
}

/// `[mag W_me + b, pha W_pe + b] W_je + b + PE` for channel `i`.
pub fn embed_channel<'g>(p: &Params<'g>, i: usize, mag: Var<'g>, pha: Var<'g>) -> Result<Var<'g>> {
    let cfg = p.config();
    let ids = p
        .layout()
        .embed
        .get(i)
        .ok_or(Error::Index { index: i, size: cfg.channels })?;
    if mag.cols() != cfg.mag_dim || pha.cols() != cfg.pha_dim || mag.rows() != pha.rows() {
        return Err(Error::shape("embed_channel", &mag.shape(), &pha.shape()));
    }
    let m = mag.matmul(p.get(ids.mag_w))?.add_row(p.get(ids.mag_b))?;
    let ph = pha.matmul(p.get(ids.pha_w))?.add_row(p.get(ids.pha_b))?;
    let joint = concat_cols(&[m, ph])?
        .matmul(p.get(ids.joint_w))?
        .add_row(p.get(ids.joint_b))?;
    let pe = p.graph().constant(positional_encoding(mag.rows(), cfg.d_model));
    joint.add(pe)
}

/// Token rows of `W_te` plus `b_te` plus PE.
pub fn embed_tokens<'g>(p: &Params<'g>, ids: &[usize]) -> Result<Var<'g>> {
    let cfg = p.config();
    let layout = p.layout();
    let rows = embedding_lookup(p.get(layout.tok_w), ids)?;
    let pe = p.graph().constant(positional_encoding(ids.len(), cfg.d_model));
    rows.add_row(p.get(layout.tok_b))?.add(pe)
}

fn frame_mask(x: Var<'_>, valid: Option<usize>) -> AttnMask {
    AttnMask {
        key_len: valid.unwrap_or_else(|| x.rows()),
        causal: false,
    }
}

/// Channel-wise self attention followed by the feed-forward block.
/// Identity when CSA is disabled.
pub fn csa_layer<'g>(
    p: &Params<'g>,
    layer: usize,
    channel: usize,
    x: Var<'g>,
    valid: Option<usize>,
) -> Result<Var<'g>> {
    let Some((attn, ffn)) = &p.layout().enc[layer].csa else {
        return Ok(x);
    };
    let qkv = qkv(p, attn, channel, x, x)?;
    let h = attend_and_norm(p, attn, qkv, x, Some(frame_mask(x, valid)))?;
    ffn_block(p, ffn, h)
}

/// `Σ_{j≠i} A_j ⊙ H_j`: the other channels, mixed elementwise.
pub fn cca_mix<'g>(p: &Params<'g>, layer: usize, channel: usize, hs: &[Var<'g>]) -> Result<Var<'g>> {
    let cca = p.layout().enc[layer]
        .cca
        .as_ref()
        .ok_or_else(|| Error::Config("cross-channel attention is disabled".into()))?;
    if hs.len() < 2 {
        return Err(Error::Config("cross-channel attention needs at least 2 channels".into()));
    }
    let terms = hs
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != channel)
        .map(|(j, h)| h.mul_row(p.get(cca.mix[j])))
        .collect::<Result<Vec<_>>>()?;
    add_n(&terms)
}

/// Keys and values of channel `i`'s cross-channel attention.
pub fn cca_kv<'g>(
    p: &Params<'g>,
    layer: usize,
    channel: usize,
    hs: &[Var<'g>],
) -> Result<(Var<'g>, Var<'g>)> {
    let mixed = cca_mix(p, layer, channel, hs)?;
    let cca = p.layout().enc[layer].cca.as_ref().expect("checked by cca_mix");
    let act = p.config().qkv_activation;
    let b = cca.attn.bias(channel);
    Ok((
        project(mixed, p.get(cca.attn.w[1]), p.get(b[1]), act)?,
        project(mixed, p.get(cca.attn.w[2]), p.get(b[2]), act)?,
    ))
}

/// Cross-channel attention: queries from channel `i`, keys and values from
/// the mixed other channels, residual from channel `i`. Identity when CCA is
/// disabled.
pub fn cca_layer<'g>(
    p: &Params<'g>,
    layer: usize,
    channel: usize,
    hs: &[Var<'g>],
    valid: Option<usize>,
) -> Result<Var<'g>> {
    let x = *hs.get(channel).ok_or(Error::Index {
        index: channel,
        size: hs.len(),
    })?;
    let Some(cca) = &p.layout().enc[layer].cca else {
        return Ok(x);
    };
    let act = p.config().qkv_activation;
    let b = cca.attn.bias(channel);
    let q = project(x, p.get(cca.attn.w[0]), p.get(b[0]), act)?;
    let (k, v) = cca_kv(p, layer, channel, hs)?;
    let h = attend_and_norm(p, &cca.attn, [q, k, v], x, Some(frame_mask(x, valid)))?;
    ffn_block(p, &cca.ffn, h)
}

/// Runs the encoder stack: every layer applies CSA to each channel, then CCA
/// to each channel. `valid` frames limit which keys are attended to.
pub fn encode<'g>(p: &Params<'g>, embedded: &[Var<'g>], valid: Option<usize>) -> Result<Vec<Var<'g>>> {
    let cfg = p.config();
    if embedded.len() != cfg.channels {
        return Err(Error::Input(format!(
            "model expects {} channels, got {}",
            cfg.channels,
            embedded.len()
        )));
    }
    let mut hs = embedded.to_vec();
    for layer in 0..cfg.enc_layers {
        hs = hs
            .iter()
            .enumerate()
            .map(|(i, &x)| csa_layer(p, layer, i, x, valid))
            .collect::<Result<_>>()?;
        if cfg.use_cca {
            hs = (0..hs.len())
                .map(|i| cca_layer(p, layer, i, &hs, valid))
                .collect::<Result<_>>()?;
        }
    }
    Ok(hs)
}

/// Embeds raw per-channel features and encodes them.
pub fn encode_features<'g>(
    p: &Params<'g>,
    channels: &[(&Tensor, &Tensor)],
    valid: Option<usize>,
) -> Result<Vec<Var<'g>>> {
    let g = p.graph();
    let embedded = channels
        .iter()
        .enumerate()
        .map(|(i, (mag, pha))| {
            embed_channel(p, i, g.constant((*mag).clone()), g.constant((*pha).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    encode(p, &embedded, valid)
}

/// Masked (causal) self attention over token embeddings.
pub fn msa_layer<'g>(p: &Params<'g>, layer: usize, x: Var<'g>, valid: Option<usize>) -> Result<Var<'g>> {
    let ids = &p.layout().dec[layer].msa;
    let qkv = qkv(p, ids, 0, x, x)?;
    let mask = AttnMask {
        key_len: valid.unwrap_or_else(|| x.rows()),
        causal: true,
    };
    attend_and_norm(p, ids, qkv, x, Some(mask))
}

/// Encoder-decoder attention over the channel mean of the encoder outputs,
/// then the feed-forward block.
pub fn eda_layer<'g>(
    p: &Params<'g>,
    layer: usize,
    hsa: Var<'g>,
    enc: &[Var<'g>],
    enc_valid: Option<usize>,
) -> Result<Var<'g>> {
    let ids = &p.layout().dec[layer];
    let memory = mean_over(enc)?;
    let qkv = qkv(p, &ids.eda, 0, hsa, memory)?;
    let h = attend_and_norm(p, &ids.eda, qkv, hsa, Some(frame_mask(memory, enc_valid)))?;
    ffn_block(p, &ids.ffn, h)
}

/// Decoder logits (U × L) for a BOS-initial prefix.
pub fn decode_forward<'g>(
    p: &Params<'g>,
    prefix: &[usize],
    enc: &[Var<'g>],
    enc_valid: Option<usize>,
    prefix_valid: Option<usize>,
) -> Result<Var<'g>> {
    if prefix.is_empty() {
        return Err(Error::Input("decoder prefix is empty".into()));
    }
    let cfg = p.config();
    let mut x = embed_tokens(p, prefix)?;
    for layer in 0..cfg.dec_layers {
        let h = msa_layer(p, layer, x, prefix_valid)?;
        x = eda_layer(p, layer, h, enc, enc_valid)?;
    }
    let layout = p.layout();
    x.matmul(p.get(layout.out_w))?.add_row(p.get(layout.out_b))
}

/// Label-smoothed target distribution: `1 - eps` on the target, `eps / (L-1)`
/// elsewhere, all-zero rows at PAD targets.
pub fn smoothed_targets(targets: &[usize], vocab: usize, eps: f64) -> Result<(Tensor, usize)> {
    let off = eps / (vocab - 1) as f64;
    let mut data = vec![0.0; targets.len() * vocab];
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t >= vocab {
            return Err(Error::Index { index: t, size: vocab });
        }
        count += 1;
        let row = &mut data[r * vocab..(r + 1) * vocab];
        row.fill(off);
        row[t] = 1.0 - eps;
    }
    Ok((Tensor::new(&[targets.len(), vocab], data)?, count))
}

/// Summed label-smoothed cross-entropy over non-PAD positions, with the
/// number of positions counted.
pub fn loss_sum<'g>(logits: Var<'g>, targets: &[usize], eps: f64) -> Result<(Var<'g>, usize)> {
    let (u, vocab) = (logits.rows(), logits.cols());
    if u != targets.len() {
        return Err(Error::shape("loss", &logits.shape(), &[targets.len(), vocab]));
    }
    let (q, count) = smoothed_targets(targets, vocab, eps)?;
    let logp = logits.log_softmax_rows()?;
    Ok((logp.mul_const(&q)?.sum().scale(-1.0), count))
}

/// Mean label-smoothed cross-entropy over non-PAD positions.
pub fn loss<'g>(logits: Var<'g>, targets: &[usize], eps: f64) -> Result<Var<'g>> {
    let (sum, count) = loss_sum(logits, targets, eps)?;
    if count == 0 {
        return Err(Error::Input("every target position is PAD".into()));
    }
    Ok(sum.scale(1.0 / count as f64))
}
