use bertv::corpus::Label;
use bertv::encoder::{apply_freeze_policy, grad_check_model, EncoderConfig, EncoderWeights, FreezePolicy, Mode, Pooling};
use bertv::numerics::{adam_step, AdamConfig, AdamState, Matrix};
use bertv::rng::seeded;
use bertv::tokenizer::{TokenSequence, CLS, PAD};

fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
    let mut v = vec![CLS];
    v.extend_from_slice(ids);
    let true_length = v.len();
    v.resize(max_len, PAD);
    TokenSequence {
        mask: (0..max_len).map(|i| u8::from(i < true_length)).collect(),
        ids: v,
        true_length,
    }
}

/// Overwrite every tensor with smooth pseudo-random values of magnitude
/// about `scale`, so that gains and biases are exercised too.
fn scramble(w: &mut EncoderWeights<f64>, scale: f64) {
    for (t, p) in w.params.iter_mut().enumerate() {
        for (k, x) in p.value.as_mut_slice().iter_mut().enumerate() {
            let base = if p.name.ends_with("gain") { 1.0 } else { 0.0 };
            *x = base + scale * ((k as f64 * 1.731 + t as f64 * 0.377).sin() + 0.3 * (k as f64 * 0.41).cos());
        }
    }
}

// ---------- independent straight-line oracle ----------

type M = Vec<Vec<f64>>;

fn mat(w: &EncoderWeights<f64>, name: &str) -> M {
    let p = w.param(name).unwrap();
    (0..p.value.rows()).map(|r| p.value.row(r).to_vec()).collect()
}

fn affine(x: &[f64], w: &M, b: &M) -> Vec<f64> {
    (0..w[0].len())
        .map(|j| b[0][j] + (0..x.len()).map(|i| x[i] * w[i][j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn norm(x: &[f64], g: &M, b: &M) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g[0][i] * (v - mean) / (var + 1e-5).sqrt() + b[0][i])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One layer, one head, `[CLS]` pooling, one hidden head layer.
fn oracle_logits(w: &EncoderWeights<f64>, s: &TokenSequence) -> Vec<f64> {
    let tok = mat(w, "embeddings.token");
    let pos = mat(w, "embeddings.position");
    let p = |n: &str| mat(w, &format!("layer1.{n}"));
    let len = s.ids.len();
    let h: M = (0..len).map(|i| add(&tok[s.ids[i] as usize], &pos[i])).collect();
    let q: M = h.iter().map(|x| affine(x, &p("attn.q.weight"), &p("attn.q.bias"))).collect();
    let k: M = h.iter().map(|x| affine(x, &p("attn.k.weight"), &p("attn.k.bias"))).collect();
    let v: M = h.iter().map(|x| affine(x, &p("attn.v.weight"), &p("attn.v.bias"))).collect();
    let d = h[0].len() as f64;
    let real: Vec<usize> = (0..len).filter(|&j| s.mask[j] == 1).collect();
    let mut out = Vec::new();
    for i in 0..len {
        let scores: Vec<f64> = real
            .iter()
            .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut ctx = vec![0.0; h[0].len()];
        for (t, &j) in real.iter().enumerate() {
            for c in 0..ctx.len() {
                ctx[c] += e[t] / z * v[j][c];
            }
        }
        let a = affine(&ctx, &p("attn.out.weight"), &p("attn.out.bias"));
        let x1 = norm(&add(&h[i], &a), &p("ln1.gain"), &p("ln1.bias"));
        let f: Vec<f64> = affine(&x1, &p("ffn.in.weight"), &p("ffn.in.bias")).into_iter().map(gelu).collect();
        let f = affine(&f, &p("ffn.out.weight"), &p("ffn.out.bias"));
        out.push(norm(&add(&x1, &f), &p("ln2.gain"), &p("ln2.bias")));
    }
    let hidden: Vec<f64> = affine(&out[0], &mat(w, "head.hidden1.weight"), &mat(w, "head.hidden1.bias"))
        .into_iter()
        .map(gelu)
        .collect();
    affine(&hidden, &mat(w, "head.output.weight"), &mat(w, "head.output.bias"))
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 9,
        max_len: 5,
        d_model: 4,
        n_heads: 1,
        n_layers: 1,
        d_ff: 6,
        dropout_rate: 0.0,
        head_layers: 1,
        ..Default::default()
    }
}

#[test]
fn forward_matches_hand_traced_oracle() {
    let mut w = EncoderWeights::<f64>::init(tiny(), 1).unwrap();
    scramble(&mut w, 0.7);
    let batch = vec![seq(&[4, 7, 1], 5), seq(&[8, 5, 6, 4], 5)];
    let logits = w.forward(&batch, Mode::Eval).unwrap();
    for (b, s) in batch.iter().enumerate() {
        let expect = oracle_logits(&w, s);
        for c in 0..3 {
            assert!((logits[(b, c)] - expect[c]).abs() < 1e-6, "{b} {c}: {} vs {}", logits[(b, c)], expect[c]);
        }
    }
}

fn mini() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        max_len: 8,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        dropout_rate: 0.1,
        ..Default::default()
    }
}

fn mini_batch() -> (Vec<TokenSequence>, Vec<Label>) {
    (
        vec![seq(&[5, 9, 1, 12], 8), seq(&[20, 3, 7, 7, 29, 4, 11], 8)],
        vec![Label::Excellent, Label::Bad],
    )
}

#[test]
fn full_model_gradients_match_differences() {
    for pooling in [Pooling::Cls, Pooling::Mean] {
        for (dropout, head_layers) in [(0.0, 1), (0.1, 1), (0.0, 0), (0.2, 2)] {
            let cfg = EncoderConfig {
                pooling,
                dropout_rate: dropout,
                head_layers,
                ..mini()
            };
            let mut w = EncoderWeights::<f64>::init(cfg, 1).unwrap();
            w.perturb(0.3, 1);
            let (batch, labels) = mini_batch();
            let seed = (dropout > 0.0).then_some(5);
            let r = grad_check_model(&mut w, &batch, &labels, seed, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{pooling:?} dropout {dropout} head {head_layers}: {r:?}");
            assert!(r.coords_checked > 1000);
            for p in w.params.iter().filter(|p| p.name.ends_with("attn.k.bias")) {
                assert!(p.grad.as_slice().iter().all(|&g| g == 0.0));
            }
        }
    }
}

#[test]
fn gradients_with_partial_freeze() {
    let mut w = EncoderWeights::<f64>::init(mini(), 7).unwrap();
    w.perturb(0.3, 1);
    apply_freeze_policy(&mut w, &FreezePolicy::new(0.4));
    let (batch, labels) = mini_batch();
    let r = grad_check_model(&mut w, &batch, &labels, None, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    for p in &w.params {
        if p.frozen {
            assert!(p.grad.as_slice().iter().all(|&g| g == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn fully_frozen_backbone_leaves_head_gradients_only() {
    let mut w = EncoderWeights::<f64>::init(mini(), 7).unwrap();
    scramble(&mut w, 0.3);
    apply_freeze_policy(&mut w, &FreezePolicy::new(1.0));
    let (batch, labels) = mini_batch();
    w.backward(&batch, &labels, Mode::Eval).unwrap();
    let n_backbone = w.backbone_len();
    for (i, p) in w.params.iter().enumerate() {
        let nonzero = p.grad.as_slice().iter().any(|&g| g != 0.0);
        assert_eq!(nonzero, i >= n_backbone, "{}", p.name);
    }
}

#[test]
fn pad_tokens_do_not_change_outputs() {
    for pooling in [Pooling::Cls, Pooling::Mean] {
        let cfg = EncoderConfig { pooling, ..mini() };
        let mut w = EncoderWeights::<f32>::init(cfg, 3).unwrap();
        let mut w64 = w.cast::<f64>();
        scramble(&mut w64, 0.4);
        w = w64.cast();
        let (batch, _) = mini_batch();
        let base = w.forward(&batch, Mode::Eval).unwrap();
        let mut mutated = batch.clone();
        for s in &mut mutated {
            for i in s.true_length..s.ids.len() {
                s.ids[i] = 17 + i as u32;
            }
        }
        let again = w.forward(&mutated, Mode::Eval).unwrap();
        let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&base), bits(&again), "{pooling:?}");
    }
}

#[test]
fn attention_rows_are_distributions_over_real_tokens() {
    let mut w = EncoderWeights::<f64>::init(mini(), 3).unwrap();
    scramble(&mut w, 0.4);
    let (batch, _) = mini_batch();
    let probs = w.attention_probs(&batch).unwrap();
    assert_eq!(probs.len(), 2);
    for layer in &probs {
        assert_eq!(layer.len(), batch.len() * 2);
        for (k, pm) in layer.iter().enumerate() {
            let s = &batch[k / 2];
            for i in 0..8 {
                let row = pm.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in s.true_length..8 {
                    assert!(row[j] < 1e-6);
                }
            }
        }
    }
}

#[test]
fn eval_is_deterministic_and_batch_order_equivariant() {
    let w = EncoderWeights::<f32>::init(mini(), 4).unwrap();
    let (batch, _) = mini_batch();
    let a = w.forward(&batch, Mode::Eval).unwrap();
    let b = w.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let rev: Vec<_> = batch.iter().rev().cloned().collect();
    let r = w.forward(&rev, Mode::Eval).unwrap();
    assert_eq!(a.row(0), r.row(1));
    assert_eq!(a.row(1), r.row(0));
    assert!(a.is_finite());
    assert_eq!(a.shape(), (2, 3));
}

#[test]
fn train_mode_dropout_is_seeded() {
    let w = EncoderWeights::<f32>::init(mini(), 4).unwrap();
    let (batch, _) = mini_batch();
    let a = w.forward(&batch, Mode::Train(&mut seeded(1, 9))).unwrap();
    let b = w.forward(&batch, Mode::Train(&mut seeded(1, 9))).unwrap();
    let e = w.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, e);
}

#[test]
fn rejects_bad_batches() {
    let w = EncoderWeights::<f32>::init(mini(), 4).unwrap();
    assert!(w.forward(&[], Mode::Eval).is_err());
    assert!(w.forward(&[seq(&[1], 6)], Mode::Eval).is_err());
    assert!(w.forward(&[seq(&[99], 8)], Mode::Eval).is_err());
    let mut w = w;
    let (batch, _) = mini_batch();
    assert!(w.backward(&batch, &[Label::Bad], Mode::Eval).is_err());
}

#[test]
fn adam_drives_loss_down_on_a_small_batch() {
    let cfg = EncoderConfig {
        dropout_rate: 0.0,
        ..mini()
    };
    let mut w = EncoderWeights::<f32>::init(cfg, 8).unwrap();
    let batch = vec![
        seq(&[5, 6, 7], 8),
        seq(&[5, 6, 8], 8),
        seq(&[10, 11, 12], 8),
        seq(&[10, 13, 12], 8),
        seq(&[20, 21, 22], 8),
        seq(&[23, 21, 22], 8),
    ];
    let labels = [Label::Bad, Label::Bad, Label::Good, Label::Good, Label::Excellent, Label::Excellent];
    let mut state = AdamState::new(&w.params);
    let hp = AdamConfig::with_lr(1e-2);
    let first = w.backward(&batch, &labels, Mode::Eval).unwrap().loss;
    let mut last = first;
    for _ in 0..50 {
        last = w.backward(&batch, &labels, Mode::Eval).unwrap().loss;
        adam_step(&mut w.params, &mut state, &hp).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(w.predict(&batch).unwrap(), labels);
}
