use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::audio::{BOS, PAD};
use crate::autograd::AttnMask;
use crate::gradcheck::toy_config;

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn zero_params(model: &mut Model) {
    for t in model.params_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
}

/// Copies every channel-0 tensor onto the matching tensors of the other channels.
fn tie_channels(model: &mut Model) {
    let names = model.params().names().to_vec();
    for name in names.iter().filter(|n| n.contains(".ch") && !n.contains(".ch0")) {
        let pos = name.find(".ch").unwrap();
        let tail = &name[pos + 3..];
        let rest = tail.trim_start_matches(|c: char| c.is_ascii_digit());
        let src = format!("{}.ch0{}", &name[..pos], rest);
        let value = model.params().by_name(&src).unwrap().clone();
        *model.params_mut().by_name_mut(name).unwrap() = value;
    }
}

/// Perturbs biases and mixing vectors away from their constant inits.
fn jitter(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn positional_encoding_at_origin() {
    let pe = positional_encoding(3, 8);
    for k in 0..4 {
        assert_eq!(pe.get2(0, 2 * k), 0.0);
        assert_eq!(pe.get2(0, 2 * k + 1), 1.0);
    }
    assert_eq!(pe.get2(1, 0), 1f64.sin());
}

#[test]
fn zero_weights_embed_to_positional_encoding() {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), 1).unwrap();
    zero_params(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let p = model.bind(&g);
    let mag = g.constant(rand_tensor(5, cfg.mag_dim, &mut rng));
    let pha = g.constant(rand_tensor(5, cfg.pha_dim, &mut rng));
    let x = embed_channel(&p, 1, mag, pha).unwrap();
    assert_eq!(*x.value(), positional_encoding(5, cfg.d_model));
    let t = embed_tokens(&p, &[3, 4, 5]).unwrap();
    assert_eq!(*t.value(), positional_encoding(3, cfg.d_model));
}

#[test]
fn embed_errors() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 1).unwrap();
    let g = Graph::new();
    let p = model.bind(&g);
    let mag = g.constant(Tensor::zeros(&[4, cfg.mag_dim + 1]));
    let pha = g.constant(Tensor::zeros(&[4, cfg.pha_dim]));
    assert!(matches!(embed_channel(&p, 0, mag, pha), Err(Error::Shape { .. })));
    assert!(matches!(embed_tokens(&p, &[1, cfg.vocab_size]), Err(Error::Index { .. })));
    assert!(matches!(decode_forward(&p, &[], &[], None, None), Err(Error::Input(_))));
}

#[test]
fn repeated_token_differs_by_position_only() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 4).unwrap();
    let g = Graph::new();
    let p = model.bind(&g);
    let t = embed_tokens(&p, &[4, 4]).unwrap().to_tensor();
    let pe = positional_encoding(2, cfg.d_model);
    for c in 0..cfg.d_model {
        let got = t.get2(1, c) - t.get2(0, c);
        let want = pe.get2(1, c) - pe.get2(0, c);
        assert!((got - want).abs() < 1e-14);
    }
}

#[test]
fn identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let q = g.constant(rand_tensor(3, 8, &mut rng));
    let krow = rand_tensor(1, 8, &mut rng);
    let k = g.constant(Tensor::from_rows(&vec![krow.row(0).to_vec(); 4]).unwrap());
    let v = rand_tensor(4, 8, &mut rng);
    let out = mh_sdpa(q, k, g.constant(v.clone()), 2, None).unwrap().to_tensor();
    for r in 0..3 {
        for c in 0..8 {
            let mean = (0..4).map(|i| v.get2(i, c)).sum::<f64>() / 4.0;
            assert!((out.get2(r, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_weights_are_lower_triangular() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Graph::new();
    let x = g.constant(rand_tensor(3, 4, &mut rng));
    let mask = AttnMask { key_len: 3, causal: true };
    for w in attention_weights(x, x, 2, Some(mask)).unwrap() {
        let w = w.to_tensor();
        for r in 0..3 {
            for c in r + 1..3 {
                assert_eq!(w.get2(r, c), 0.0);
            }
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
    let y = g.constant(rand_tensor(2, 4, &mut rng));
    assert!(matches!(attention_weights(x, y, 2, Some(mask)), Err(Error::Shape { .. })));
}

/// Explicit-loop multi-head attention.
fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let dk = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += e[j] / z * vj[c];
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for heads in [1, 2, 4] {
        let (q, k, v) = (rand_tensor(3, 8, &mut rng), rand_tensor(5, 8, &mut rng), rand_tensor(5, 8, &mut rng));
        let g = Graph::new();
        let out = mh_sdpa(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), heads, None)
            .unwrap()
            .to_tensor();
        let want = naive_attention(&rows(&q), &rows(&k), &rows(&v), heads);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((out.get2(r, c) - w).abs() < 1e-10);
            }
        }
    }
}

fn naive_linear(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| b.data()[c] + row.iter().enumerate().map(|(r, v)| v * w.get2(r, c)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn naive_relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn naive_add_ln(x: &[Vec<f64>], h: &[Vec<f64>], g: &Tensor, b: &Tensor, eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .zip(h)
        .map(|(a, c)| {
            let s: Vec<f64> = a.iter().zip(c).map(|(u, v)| u + v).collect();
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            s.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

/// Hand-written single-channel encoder over named parameters.
fn naive_encoder(model: &Model, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let ps = model.params();
    let t = |n: String| ps.by_name(&n).unwrap().clone();
    let cfg = model.config();
    let mut x = x.to_vec();
    for l in 0..cfg.enc_layers {
        let p = format!("enc{l}.csa");
        let proj = |n: &str, x: &[Vec<f64>]| naive_relu(naive_linear(x, &t(format!("{p}.{n}.w")), &t(format!("{p}.{n}.b"))));
        let (q, k, v) = (proj("q", &x), proj("k", &x), proj("v", &x));
        let a = naive_attention(&q, &k, &v, cfg.heads);
        let a = naive_linear(&a, &t(format!("{p}.out.w")), &t(format!("{p}.out.b")));
        let h = naive_add_ln(&x, &a, &t(format!("{p}.ln.g")), &t(format!("{p}.ln.b")), cfg.ln_eps);
        let f = naive_relu(naive_linear(&h, &t(format!("{p}.ffn.w1")), &t(format!("{p}.ffn.b1"))));
        let f = naive_linear(&f, &t(format!("{p}.ffn.w2")), &t(format!("{p}.ffn.b2")));
        x = naive_add_ln(&h, &f, &t(format!("{p}.ffn.ln.g")), &t(format!("{p}.ffn.ln.b")), cfg.ln_eps);
    }
    x
}

#[test]
fn single_channel_encoder_matches_reference() {
    let cfg = ModelConfig {
        channels: 1,
        use_cca: false,
        ..toy_config()
    };
    let mut model = Model::new(cfg.clone(), 8).unwrap();
    jitter(&mut model, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(6, cfg.d_model, &mut rng);
    let g = Graph::new();
    let p = model.bind(&g);
    let out = encode(&p, &[g.constant(x.clone())], None).unwrap();
    let want = naive_encoder(&model, &rows(&x));
    let got = out[0].to_tensor();
    for (r, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            assert!((got.get2(r, c) - w).abs() < 1e-10);
        }
    }
}

#[test]
fn disabled_csa_is_identity() {
    let cfg = ModelConfig {
        use_csa: false,
        ..toy_config()
    };
    let model = Model::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::new();
    let p = model.bind(&g);
    let x = g.constant(rand_tensor(4, cfg.d_model, &mut rng));
    let y = csa_layer(&p, 0, 0, x, None).unwrap();
    assert_eq!(y.id(), x.id());
}

#[test]
fn cca_keys_exclude_own_channel() {
    let cfg = ModelConfig {
        channels: 3,
        ..toy_config()
    };
    let mut model = Model::new(cfg.clone(), 12).unwrap();
    jitter(&mut model, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let base: Vec<Tensor> = (0..3).map(|_| rand_tensor(5, cfg.d_model, &mut rng)).collect();
    for i in 0..3 {
        let kv = |hs: &[Tensor]| {
            let g = Graph::new();
            let p = model.bind(&g);
            let vars: Vec<_> = hs.iter().map(|t| g.constant(t.clone())).collect();
            let (k, v) = cca_kv(&p, 0, i, &vars).unwrap();
            (k.to_tensor(), v.to_tensor())
        };
        let mut moved = base.clone();
        moved[i] = rand_tensor(5, cfg.d_model, &mut rng);
        let (a, b) = (kv(&base), kv(&moved));
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        let mut other = base.clone();
        other[(i + 1) % 3] = rand_tensor(5, cfg.d_model, &mut rng);
        assert_ne!(kv(&other).0.data(), a.0.data());
    }
}

#[test]
fn zero_mixing_gives_uniform_attention() {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), 15).unwrap();
    jitter(&mut model, 16);
    for j in 0..cfg.channels {
        model.params_mut().by_name_mut(&format!("enc0.cca.mix.ch{j}")).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let g = Graph::new();
    let p = model.bind(&g);
    let hs: Vec<_> = (0..2).map(|_| g.constant(rand_tensor(5, cfg.d_model, &mut rng))).collect();
    let (k, _) = cca_kv(&p, 0, 0, &hs).unwrap();
    let kt = k.to_tensor();
    for r in 1..5 {
        assert_eq!(kt.row(r), kt.row(0));
    }
    let q = g.constant(rand_tensor(5, cfg.d_model, &mut rng));
    for w in attention_weights(q, k, cfg.heads, None).unwrap() {
        for v in w.to_tensor().data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }
}

#[test]
fn cca_needs_two_channels() {
    let cfg = ModelConfig {
        channels: 1,
        ..toy_config()
    };
    assert!(matches!(Model::new(cfg, 1), Err(Error::Config(_))));
}

#[test]
fn eda_collapses_identical_channels() {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), 18).unwrap();
    jitter(&mut model, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = rand_tensor(5, cfg.d_model, &mut rng);
    let q = rand_tensor(3, cfg.d_model, &mut rng);
    let run = |copies: usize| {
        let g = Graph::new();
        let p = model.bind(&g);
        let enc: Vec<_> = (0..copies).map(|_| g.constant(h.clone())).collect();
        eda_layer(&p, 0, g.constant(q.clone()), &enc, None).unwrap().to_tensor()
    };
    let (two, one) = (run(2), run(1));
    assert_eq!(two.shape(), &[3, cfg.d_model]);
    assert!(two.max_abs_diff(&one) < 1e-10);
    let g = Graph::new();
    let p = model.bind(&g);
    let single = eda_layer(&p, 0, g.constant(q.slice_rows(0, 1).unwrap()), &[g.constant(h.clone())], None).unwrap();
    assert_eq!(single.shape(), vec![1, cfg.d_model]);
}

#[test]
fn identical_channels_with_tied_parameters_agree() {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), 21).unwrap();
    jitter(&mut model, 22);
    tie_channels(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_tensor(5, cfg.d_model, &mut rng);
    let g = Graph::new();
    let p = model.bind(&g);
    let out = encode(&p, &[g.constant(x.clone()), g.constant(x)], None).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].to_tensor(), out[1].to_tensor());
}

#[test]
fn channel_permutation_with_tied_parameters() {
    let cfg = ModelConfig {
        channels: 3,
        ..toy_config()
    };
    let mut model = Model::new(cfg.clone(), 24).unwrap();
    jitter(&mut model, 25);
    tie_channels(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let feats: Vec<(Tensor, Tensor)> = (0..3)
        .map(|_| (rand_tensor(5, cfg.mag_dim, &mut rng), rand_tensor(5, cfg.pha_dim, &mut rng)))
        .collect();
    let run = |order: &[usize]| {
        let g = Graph::new();
        let p = model.bind(&g);
        let refs: Vec<_> = order.iter().map(|&i| (&feats[i].0, &feats[i].1)).collect();
        let enc = encode_features(&p, &refs, None).unwrap();
        let logits = decode_forward(&p, &[BOS, 4, 5], &enc, None, None).unwrap();
        (enc.iter().map(|v| v.to_tensor()).collect::<Vec<_>>(), logits.to_tensor())
    };
    let (enc, logits) = run(&[0, 1, 2]);
    let order = [2, 0, 1];
    let (penc, plogits) = run(&order);
    for (slot, &src) in order.iter().enumerate() {
        assert!(penc[slot].max_abs_diff(&enc[src]) < 1e-12);
    }
    assert!(plogits.max_abs_diff(&logits) < 1e-12);
}

#[test]
fn decoder_is_causal_bit_exact() {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), 27).unwrap();
    jitter(&mut model, 28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let enc_t: Vec<Tensor> = (0..2).map(|_| rand_tensor(5, cfg.d_model, &mut rng)).collect();
    let logits = |prefix: &[usize]| {
        let g = Graph::new();
        let p = model.bind(&g);
        let enc: Vec<_> = enc_t.iter().map(|t| g.constant(t.clone())).collect();
        decode_forward(&p, prefix, &enc, None, None).unwrap().to_tensor()
    };
    let base = [BOS, 3, 4, 5, 3];
    let a = logits(&base);
    for k in 1..base.len() {
        let mut changed = base;
        changed[k] = if base[k] == 5 { 4 } else { 5 };
        let b = logits(&changed);
        for j in 0..k {
            assert_eq!(a.row(j), b.row(j), "position {j} moved when token {k} changed");
        }
        assert_ne!(a.row(k), b.row(k));
    }
}

#[test]
fn log_softmax_rows_are_distributions() {
    let cfg = toy_config();
    let model = Model::new(cfg.clone(), 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let g = Graph::new();
    let p = model.bind(&g);
    let enc: Vec<_> = (0..2).map(|_| g.constant(rand_tensor(4, cfg.d_model, &mut rng))).collect();
    let lp = decode_forward(&p, &[BOS, 3, 4], &enc, None, None)
        .unwrap()
        .log_softmax_rows()
        .unwrap()
        .to_tensor();
    for r in 0..lp.rows() {
        let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn uniform_logits_cost_ln_vocab() {
    for vocab in [4, 6, 4002] {
        for eps in [0.0, 0.1, 0.3] {
            let g = Graph::new();
            let logits = g.constant(Tensor::full(&[3, vocab], 0.7));
            let l = loss(logits, &[3, 1, 2], eps).unwrap().scalar_value();
            assert!((l - (vocab as f64).ln()).abs() < 1e-12, "L={vocab} eps={eps} err {:e}", l - (vocab as f64).ln());
        }
    }
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let g = Graph::new();
    let mut t = Tensor::zeros(&[2, 5]);
    t.data_mut()[3] = 60.0;
    t.data_mut()[5 + 4] = 60.0;
    let l = loss(g.constant(t), &[3, 4], 0.0).unwrap().scalar_value();
    assert!(l < 1e-20);
}

#[test]
fn loss_at_smoothed_target_is_its_entropy() {
    let (vocab, eps) = (4, 0.1);
    let off: f64 = eps / 3.0;
    let entropy = -(0.9f64 * 0.9f64.ln() + 3.0 * off * off.ln());
    let target = 2;
    let mut logits = vec![off.ln(); vocab];
    logits[target] = 0.9f64.ln();
    let g = Graph::new();
    let l = loss(g.constant(Tensor::new(&[1, vocab], logits).unwrap()), &[target], eps)
        .unwrap()
        .scalar_value();
    assert!((l - entropy).abs() < 1e-12);
}

#[test]
fn pad_targets_are_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let logits = rand_tensor(3, 6, &mut rng);
    let g = Graph::new();
    let full = loss(g.constant(logits.slice_rows(0, 2).unwrap()), &[3, 4], 0.1).unwrap().scalar_value();
    let padded = loss(g.constant(logits), &[3, 4, PAD], 0.1).unwrap().scalar_value();
    assert!((full - padded).abs() < 1e-14);
    let all_pad = loss(g.constant(Tensor::zeros(&[2, 6])), &[PAD, PAD], 0.1);
    assert!(matches!(all_pad, Err(Error::Input(_))));
}

#[test]
fn layer_norm_rows_are_centred() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let g = Graph::new();
    let mut t = rand_tensor(4, cfg.d_model, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v = 50.0 * *v + 3.0);
    let x = g.constant(t);
    let ones = g.constant(Tensor::ones(&[cfg.d_model]));
    let zeros = g.constant(Tensor::zeros(&[cfg.d_model]));
    let y = x.layer_norm(ones, zeros, cfg.ln_eps).unwrap().to_tensor();
    for r in 0..4 {
        let mean: f64 = y.row(r).iter().sum::<f64>() / cfg.d_model as f64;
        assert!(mean.abs() < 1e-9);
    }
}

#[test]
fn vocab_delta_is_closed_form() {
    let base = ModelConfig::default();
    let doubled = ModelConfig {
        vocab_size: 2 * base.vocab_size,
        ..base.clone()
    };
    let (l, d) = (base.vocab_size, base.d_model);
    assert_eq!(count_parameters(&doubled) - count_parameters(&base), 2 * l * d + l);
}

fn paper_config(channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        d_model: 256,
        d_ff: 1024,
        heads: 4,
        enc_layers: 4,
        dec_layers: 4,
        vocab_size: 4002,
        mag_dim: 768,
        pha_dim: 512,
        ..ModelConfig::default()
    }
}

#[test]
fn paper_scale_counts() {
    let two = count_parameters(&paper_config(2));
    let three = count_parameters(&paper_config(3));
    assert!((two as f64 / 13.63e6 - 1.0).abs() < 0.05, "{two}");
    let (d, half) = (256, 128);
    let per_channel = 768 * half + half + 512 * half + half + d * d + d + 4 * (3 * d + 3 * d + d);
    assert_eq!(three - two, per_channel);
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::new(toy_config(), 36).unwrap();
    jitter(&mut model, 37);
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().names(), model.params().names());
    assert_eq!(back.params().tensors(), model.params().tensors());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn count_matches_allocation(
        channels in 1usize..4,
        half_d in 1usize..6,
        heads_pow in 0u32..2,
        d_ff in 1usize..20,
        enc in 1usize..3,
        dec in 1usize..3,
        vocab in 4usize..20,
        mag in 1usize..30,
        pha in 1usize..30,
        flags in 0usize..3,
    ) {
        let d_model = 2 * half_d * 2usize.pow(heads_pow);
        let (use_csa, use_cca) = [(true, true), (true, false), (false, true)][flags];
        let cfg = ModelConfig {
            channels: if use_cca { channels.max(2) } else { channels },
            d_model,
            d_ff,
            heads: 2usize.pow(heads_pow),
            enc_layers: enc,
            dec_layers: dec,
            vocab_size: vocab,
            mag_dim: mag,
            pha_dim: pha,
            use_csa,
            use_cca,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), 0).unwrap();
        prop_assert_eq!(model.params().num_elements(), count_parameters(&cfg));
        let names: Vec<_> = parameter_specs(&cfg).into_iter().map(|s| s.name).collect();
        prop_assert_eq!(names.as_slice(), model.params().names());
    }
}
