//! Forward and hand-written backward passes.

use super::{slot, EncoderError, EncoderWeights, Pooling, LAYER_NORM_EPS};
use crate::corpus::Label;
use crate::numerics::layers::{softmax_backward_row, softmax_in_place};
use crate::numerics::{
    cross_entropy, dropout_mask, gelu, gelu_backward, grad_check, layer_norm, layer_norm_backward,
    GradCheckReport,
    LayerNormCache, Matrix, Real,
};
use crate::rng::Rng;
use crate::tfidf::argmax;
use crate::tokenizer::TokenSequence;

/// Dropout is applied only in `Train` mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn mask<T: Real>(&mut self, rate: f32, rows: usize, cols: usize) -> Option<Matrix<T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => Some(dropout_mask(rows, cols, rate as f64, *rng)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOutput<T: Real> {
    pub loss: f64,
    pub logits: Matrix<T>,
}

struct LayerCache<T: Real> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Attention probabilities per `(example, head)`, each `L x L`.
    probs: Vec<Matrix<T>>,
    context: Matrix<T>,
    attn_drop: Option<Matrix<T>>,
    ln1: LayerNormCache<T>,
    x1: Matrix<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
    ff_drop: Option<Matrix<T>>,
    ln2: LayerNormCache<T>,
}

struct HeadCache<T: Real> {
    /// Input of each hidden layer, then the input of the output layer.
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    drops: Vec<Option<Matrix<T>>>,
}

struct ForwardCache<T: Real> {
    emb_drop: Option<Matrix<T>>,
    layers: Vec<LayerCache<T>>,
    head: HeadCache<T>,
}

fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, EncoderError> {
    let mut y = x.matmul(w)?;
    y.add_bias_in_place(b)?;
    Ok(y)
}

fn apply_mask<T: Real>(x: &mut Matrix<T>, mask: &Option<Matrix<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *v *= k;
        }
    }
}

impl<T: Real> EncoderWeights<T> {
    fn check_batch(&self, batch: &[TokenSequence]) -> Result<(), EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let c = &self.config;
        for seq in batch {
            if seq.ids.len() != c.max_len || seq.mask.len() != c.max_len {
                return Err(EncoderError::LengthMismatch {
                    expected: c.max_len,
                    got: seq.ids.len(),
                });
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(EncoderError::IdOutOfRange {
                    id,
                    vocab_size: c.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits, one row per sequence.
    pub fn forward(&self, batch: &[TokenSequence], mut mode: Mode<'_>) -> Result<Matrix<T>, EncoderError> {
        self.run(batch, &mut mode).map(|(logits, _)| logits)
    }

    /// Eval-mode argmax predictions, ties toward the smaller label index.
    pub fn predict(&self, batch: &[TokenSequence]) -> Result<Vec<Label>, EncoderError> {
        let logits = self.forward(batch, Mode::Eval)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
                Label::ALL[argmax(&row)]
            })
            .collect())
    }

    /// Eval-mode attention probabilities: `[layer][example * n_heads + head]`,
    /// each `max_len x max_len` with rows indexed by query position.
    pub fn attention_probs(&self, batch: &[TokenSequence]) -> Result<Vec<Vec<Matrix<T>>>, EncoderError> {
        let (_, cache) = self.run(batch, &mut Mode::Eval)?;
        Ok(cache.layers.into_iter().map(|l| l.probs).collect())
    }

    /// Mean cross-entropy of `labels` and gradients for every trainable
    /// parameter. All gradient buffers are reset first; frozen parameters keep
    /// a zero gradient.
    pub fn backward(
        &mut self,
        batch: &[TokenSequence],
        labels: &[Label],
        mut mode: Mode<'_>,
    ) -> Result<BackwardOutput<T>, EncoderError> {
        if labels.len() != batch.len() {
            return Err(EncoderError::LabelCountMismatch {
                sequences: batch.len(),
                labels: labels.len(),
            });
        }
        let (logits, cache) = self.run(batch, &mut mode)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        self.zero_grad();
        self.backprop(batch, &cache, dlogits)?;
        Ok(BackwardOutput {
            loss: loss.as_f64(),
            logits,
        })
    }

    fn run(&self, batch: &[TokenSequence], mode: &mut Mode<'_>) -> Result<(Matrix<T>, ForwardCache<T>), EncoderError> {
        self.check_batch(batch)?;
        let c = self.config;
        let (len, d) = (c.max_len, c.d_model);
        let n = batch.len() * len;

        let tok = &self.params[0].value;
        let pos = &self.params[1].value;
        let mut h = Matrix::zeros(n, d);
        for (b, seq) in batch.iter().enumerate() {
            for (i, &id) in seq.ids.iter().enumerate() {
                let row = h.row_mut(b * len + i);
                for ((o, &t), &p) in row.iter_mut().zip(tok.row(id as usize)).zip(pos.row(i)) {
                    *o = t + p;
                }
            }
        }
        let emb_drop = mode.mask(c.dropout_rate, n, d);
        apply_mask(&mut h, &emb_drop);

        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let (out, cache) = self.layer_forward(l, h, batch, mode)?;
            layers.push(cache);
            h = out;
        }

        let mut pooled = Matrix::zeros(batch.len(), d);
        for (b, seq) in batch.iter().enumerate() {
            let dst = pooled.row_mut(b);
            match c.pooling {
                Pooling::Cls => dst.copy_from_slice(h.row(b * len)),
                Pooling::Mean => {
                    let count = T::from_f64(seq.true_length.max(1) as f64);
                    for i in (0..len).filter(|&i| seq.mask[i] != 0) {
                        for (o, &x) in dst.iter_mut().zip(h.row(b * len + i)) {
                            *o += x;
                        }
                    }
                    dst.iter_mut().for_each(|o| *o /= count);
                }
            }
        }

        let base = self.head_base();
        let mut head = HeadCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            drops: Vec::new(),
        };
        let mut z = pooled;
        for k in 0..c.head_layers {
            let a = linear(&z, &self.params[base + 2 * k].value, &self.params[base + 2 * k + 1].value)?;
            let mut next = gelu(&a);
            let drop = mode.mask(c.dropout_rate, next.rows(), next.cols());
            apply_mask(&mut next, &drop);
            head.inputs.push(z);
            head.pre.push(a);
            head.drops.push(drop);
            z = next;
        }
        let out_w = base + 2 * c.head_layers;
        let logits = linear(&z, &self.params[out_w].value, &self.params[out_w + 1].value)?;
        head.inputs.push(z);

        Ok((
            logits,
            ForwardCache {
                emb_drop,
                layers,
                head,
            },
        ))
    }

    fn layer_forward(
        &self,
        l: usize,
        x: Matrix<T>,
        batch: &[TokenSequence],
        mode: &mut Mode<'_>,
    ) -> Result<(Matrix<T>, LayerCache<T>), EncoderError> {
        let c = self.config;
        let p = |s: usize| &self.params[Self::layer_base(l) + s].value;
        let (len, d, heads, dh) = (c.max_len, c.d_model, c.n_heads, c.head_dim());
        let n = x.rows();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let q = linear(&x, p(slot::Q_W), p(slot::Q_B))?;
        // A key bias shifts every score in a row by the same q.b, which the
        // softmax cancels exactly, so it is left out and its gradient is zero.
        let k = x.matmul(p(slot::K_W))?;
        let v = linear(&x, p(slot::V_W), p(slot::V_B))?;

        let mut context = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(batch.len() * heads);
        for (b, seq) in batch.iter().enumerate() {
            let row0 = b * len;
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let mut pm = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &q.row(row0 + i)[cols.clone()];
                    let srow = pm.row_mut(i);
                    for j in 0..len {
                        srow[j] = if seq.mask[j] == 0 {
                            T::neg_infinity()
                        } else {
                            let kj = &k.row(row0 + j)[cols.clone()];
                            qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                        };
                    }
                    softmax_in_place(srow);
                }
                for i in 0..len {
                    let prow = pm.row(i);
                    let mut acc = vec![T::zero(); dh];
                    for j in (0..len).filter(|&j| seq.mask[j] != 0) {
                        let w = prow[j];
                        for (a, &vv) in acc.iter_mut().zip(&v.row(row0 + j)[cols.clone()]) {
                            *a += w * vv;
                        }
                    }
                    context.row_mut(row0 + i)[cols.clone()].copy_from_slice(&acc);
                }
                probs.push(pm);
            }
        }

        let mut attn_out = linear(&context, p(slot::O_W), p(slot::O_B))?;
        let attn_drop = mode.mask(c.dropout_rate, n, d);
        apply_mask(&mut attn_out, &attn_drop);
        let r1 = x.add(&attn_out)?;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let (x1, ln1) = layer_norm(&r1, p(slot::LN1_G), p(slot::LN1_B), eps)?;

        let ff_pre = linear(&x1, p(slot::FF1_W), p(slot::FF1_B))?;
        let ff_act = gelu(&ff_pre);
        let mut ff_out = linear(&ff_act, p(slot::FF2_W), p(slot::FF2_B))?;
        let ff_drop = mode.mask(c.dropout_rate, n, d);
        apply_mask(&mut ff_out, &ff_drop);
        let r2 = x1.add(&ff_out)?;
        let (out, ln2) = layer_norm(&r2, p(slot::LN2_G), p(slot::LN2_B), eps)?;

        Ok((
            out,
            LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                context,
                attn_drop,
                ln1,
                x1,
                ff_pre,
                ff_act,
                ff_drop,
                ln2,
            },
        ))
    }

    fn accumulate(&mut self, idx: usize, grad: Matrix<T>) -> Result<(), EncoderError> {
        let p = &mut self.params[idx];
        if !p.frozen {
            p.grad.add_assign(&grad)?;
        }
        Ok(())
    }

    /// Gradients of a linear map `y = x w + b`; returns `dx` when requested.
    fn linear_backward(
        &mut self,
        w_idx: usize,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        want_dx: bool,
    ) -> Result<Option<Matrix<T>>, EncoderError> {
        if !self.params[w_idx].frozen {
            self.accumulate(w_idx, x.t_matmul(dy)?)?;
        }
        if !self.params[w_idx + 1].frozen {
            self.accumulate(w_idx + 1, dy.sum_rows())?;
        }
        Ok(if want_dx {
            Some(dy.matmul_t(&self.params[w_idx].value)?)
        } else {
            None
        })
    }

    fn backprop(&mut self, batch: &[TokenSequence], cache: &ForwardCache<T>, dlogits: Matrix<T>) -> Result<(), EncoderError> {
        let c = self.config;
        let (len, d) = (c.max_len, c.d_model);
        // Backbone gradients are needed only down to the first trainable tensor.
        let first_trainable = self
            .params
            .iter()
            .position(|p| !p.frozen)
            .unwrap_or(self.params.len());
        let base = self.head_base();
        let out_w = base + 2 * c.head_layers;
        let need_below_head = first_trainable < base;

        let mut dz = self
            .linear_backward(out_w, &cache.head.inputs[c.head_layers], &dlogits, true)?
            .expect("dx requested");
        for k in (0..c.head_layers).rev() {
            apply_mask(&mut dz, &cache.head.drops[k]);
            let da = gelu_backward(&cache.head.pre[k], &dz)?;
            let want = k > 0 || need_below_head;
            match self.linear_backward(base + 2 * k, &cache.head.inputs[k], &da, want)? {
                Some(dx) => dz = dx,
                None => return Ok(()),
            }
        }
        if !need_below_head {
            return Ok(());
        }

        let mut dh = Matrix::zeros(batch.len() * len, d);
        for (b, seq) in batch.iter().enumerate() {
            let src = dz.row(b);
            match c.pooling {
                Pooling::Cls => dh.row_mut(b * len).copy_from_slice(src),
                Pooling::Mean => {
                    let count = T::from_f64(seq.true_length.max(1) as f64);
                    for i in (0..len).filter(|&i| seq.mask[i] != 0) {
                        for (o, &g) in dh.row_mut(b * len + i).iter_mut().zip(src) {
                            *o = g / count;
                        }
                    }
                }
            }
        }

        for l in (0..c.n_layers).rev() {
            let lbase = Self::layer_base(l);
            if first_trainable >= lbase + super::TENSORS_PER_LAYER {
                // this layer and everything below are frozen
                return Ok(());
            }
            let want_input = first_trainable < lbase;
            match self.layer_backward(l, batch, &cache.layers[l], dh, want_input)? {
                Some(dx) => dh = dx,
                None => return Ok(()),
            }
        }

        apply_mask(&mut dh, &cache.emb_drop);
        if !self.params[1].frozen {
            let mut dpos = Matrix::zeros(len, d);
            for r in 0..dh.rows() {
                for (o, &g) in dpos.row_mut(r % len).iter_mut().zip(dh.row(r)) {
                    *o += g;
                }
            }
            self.accumulate(1, dpos)?;
        }
        if !self.params[0].frozen {
            let tok = &mut self.params[0].grad;
            for (b, seq) in batch.iter().enumerate() {
                for (i, &id) in seq.ids.iter().enumerate() {
                    for (o, &g) in tok.row_mut(id as usize).iter_mut().zip(dh.row(b * len + i)) {
                        *o += g;
                    }
                }
            }
        }
        Ok(())
    }

    fn layer_backward(
        &mut self,
        l: usize,
        batch: &[TokenSequence],
        lc: &LayerCache<T>,
        dout: Matrix<T>,
        want_input: bool,
    ) -> Result<Option<Matrix<T>>, EncoderError> {
        let c = self.config;
        let lb = Self::layer_base(l);
        let (len, heads, dh) = (c.max_len, c.n_heads, c.head_dim());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let (dr2, dg2, db2) = layer_norm_backward(&lc.ln2, &self.params[lb + slot::LN2_G].value, &dout)?;
        self.accumulate(lb + slot::LN2_G, dg2)?;
        self.accumulate(lb + slot::LN2_B, db2)?;

        let mut dff = dr2.clone();
        apply_mask(&mut dff, &lc.ff_drop);
        let dact = self
            .linear_backward(lb + slot::FF2_W, &lc.ff_act, &dff, true)?
            .expect("dx requested");
        let dpre = gelu_backward(&lc.ff_pre, &dact)?;
        let mut dx1 = self
            .linear_backward(lb + slot::FF1_W, &lc.x1, &dpre, true)?
            .expect("dx requested");
        dx1.add_assign(&dr2)?;

        let (dr1, dg1, db1) = layer_norm_backward(&lc.ln1, &self.params[lb + slot::LN1_G].value, &dx1)?;
        self.accumulate(lb + slot::LN1_G, dg1)?;
        self.accumulate(lb + slot::LN1_B, db1)?;

        let mut dattn = dr1.clone();
        apply_mask(&mut dattn, &lc.attn_drop);
        let dctx = self
            .linear_backward(lb + slot::O_W, &lc.context, &dattn, true)?
            .expect("dx requested");

        let n = lc.input.rows();
        let d = c.d_model;
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = vec![T::zero(); len];
        let mut ds = vec![T::zero(); len];
        for (b, seq) in batch.iter().enumerate() {
            let row0 = b * len;
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let pm = &lc.probs[b * heads + hd];
                for i in 0..len {
                    let g = &dctx.row(row0 + i)[cols.clone()];
                    let prow = pm.row(i);
                    for j in 0..len {
                        if seq.mask[j] == 0 {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &lc.v.row(row0 + j)[cols.clone()];
                        dp[j] = g.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let w = prow[j];
                        for (o, &gg) in dv.row_mut(row0 + j)[cols.clone()].iter_mut().zip(g) {
                            *o += w * gg;
                        }
                    }
                    softmax_backward_row(prow, &dp, &mut ds);
                    for j in (0..len).filter(|&j| seq.mask[j] != 0) {
                        let s = ds[j] * scale;
                        if s == T::zero() {
                            continue;
                        }
                        let kj = &lc.k.row(row0 + j)[cols.clone()];
                        for (o, &kk) in dq.row_mut(row0 + i)[cols.clone()].iter_mut().zip(kj) {
                            *o += s * kk;
                        }
                        let qi = &lc.q.row(row0 + i)[cols.clone()];
                        for (o, &qq) in dk.row_mut(row0 + j)[cols.clone()].iter_mut().zip(qi) {
                            *o += s * qq;
                        }
                    }
                }
            }
        }

        let dxq = self.linear_backward(lb + slot::Q_W, &lc.input, &dq, want_input)?;
        if !self.params[lb + slot::K_W].frozen {
            self.accumulate(lb + slot::K_W, lc.input.t_matmul(&dk)?)?;
        }
        let dxk = match want_input {
            true => Some(dk.matmul_t(&self.params[lb + slot::K_W].value)?),
            false => None,
        };
        let dxv = self.linear_backward(lb + slot::V_W, &lc.input, &dv, want_input)?;
        if !want_input {
            return Ok(None);
        }
        let mut dx = dr1;
        for part in [dxq, dxk, dxv].into_iter().flatten() {
            dx.add_assign(&part)?;
        }
        Ok(Some(dx))
    }
}

fn batch_loss(
    weights: &EncoderWeights<f64>,
    batch: &[TokenSequence],
    labels: &[Label],
    dropout_seed: Option<u64>,
) -> Result<f64, EncoderError> {
    let mut rng = dropout_seed.map(|s| crate::rng::seeded(s, crate::rng::STREAM_TRAIN));
    let mode = match rng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let logits = weights.forward(batch, mode)?;
    Ok(cross_entropy(&logits, labels)?.0)
}

/// Compare the analytic gradients of the mean cross-entropy on `batch`
/// with central differences. With `dropout_seed` every evaluation uses
/// the same dropout masks; without it dropout is off.
pub fn grad_check_model(
    weights: &mut EncoderWeights<f64>,
    batch: &[TokenSequence],
    labels: &[Label],
    dropout_seed: Option<u64>,
    eps: f64,
) -> Result<GradCheckReport, EncoderError> {
    let mut rng = dropout_seed.map(|s| crate::rng::seeded(s, crate::rng::STREAM_TRAIN));
    let mode = match rng.as_mut() {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    weights.backward(batch, labels, mode)?;
    let config = weights.config;
    let report = grad_check(
        &mut weights.params,
        |ps| {
            let w = EncoderWeights {
                config,
                params: ps.to_vec(),
            };
            batch_loss(&w, batch, labels, dropout_seed).unwrap_or(f64::NAN)
        },
        eps,
    )?;
    Ok(report)
}
