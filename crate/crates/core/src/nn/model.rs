//! Batched encoder-decoder forward pass, token cross-entropy and exact backward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::ops::{
    apply_mask, attention, attention_backward, dropout, linear, linear_backward, rms_norm,
    rms_norm_backward, AttnShape, Bias,
};
use super::params::{Attention, Gradients, ModelParameters};
use super::position::relative_position_bucket;
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward-pass mode. Dropout is only active in `Train`, with masks drawn
/// from the given seed so a pass can be replayed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// `[batch x tgt_len x vocab]` output scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub batch_size: usize,
    pub tgt_len: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, b: usize, t: usize) -> &[T] {
        let off = (b * self.tgt_len + t) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

struct AttnCache<T> {
    inv_rms: Vec<T>,
    normed: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    drop: Option<Vec<T>>,
}

struct FfnCache<T> {
    inv_rms: Vec<T>,
    normed: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    drop: Option<Vec<T>>,
}

struct EncoderLayerCache<T> {
    input: Vec<T>,
    attn: AttnCache<T>,
    mid: Vec<T>,
    ffn: FfnCache<T>,
}

struct DecoderLayerCache<T> {
    input: Vec<T>,
    self_attn: AttnCache<T>,
    after_self: Vec<T>,
    cross: AttnCache<T>,
    after_cross: Vec<T>,
    ffn: FfnCache<T>,
}

/// Attention weights recorded by a forward pass, `[batch x heads x q_len x k_len]` per layer.
pub struct AttentionTrace<T> {
    pub encoder_self: Vec<Vec<T>>,
    pub decoder_self: Vec<Vec<T>>,
    pub decoder_cross: Vec<Vec<T>>,
}

/// Everything the backward pass needs.
struct Tape<T> {
    src_drop: Option<Vec<T>>,
    encoder: Vec<EncoderLayerCache<T>>,
    enc_final_in: Vec<T>,
    enc_final_inv: Vec<T>,
    enc_out: Vec<T>,
    tgt_drop: Option<Vec<T>>,
    decoder: Vec<DecoderLayerCache<T>>,
    dec_final_in: Vec<T>,
    dec_final_inv: Vec<T>,
    dec_out: Vec<T>,
    enc_buckets: Vec<usize>,
    dec_buckets: Vec<usize>,
}

fn validate_batch<T: Scalar>(params: &ModelParameters<T>, batch: &Batch) -> Result<()> {
    let cfg = params.config();
    if batch.src_len > cfg.max_src_len || batch.tgt_len > cfg.max_tgt_len {
        return Err(Error::Shape(format!(
            "sequence lengths {}/{} exceed maxima {}/{}",
            batch.src_len, batch.tgt_len, cfg.max_src_len, cfg.max_tgt_len
        )));
    }
    let ids = batch.src.iter().chain(&batch.tgt_in).chain(&batch.tgt_out);
    if let Some(bad) = ids.copied().find(|&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} out of range")));
    }
    Ok(())
}

pub(crate) fn bucket_table(
    q_len: usize,
    k_len: usize,
    bidirectional: bool,
    buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for i in 0..q_len {
        for j in 0..k_len {
            out.push(relative_position_bucket(
                j as i64 - i as i64,
                bidirectional,
                buckets,
                max_distance,
            ));
        }
    }
    out
}

pub(crate) fn embed<T: Scalar>(embedding: &Tensor<T>, ids: &[u32], d: usize) -> Vec<T> {
    let mut x = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let off = id as usize * d;
        x.extend_from_slice(&embedding.data()[off..off + d]);
    }
    x
}

fn add_in_place<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

struct Forward<'a, T: Scalar> {
    params: &'a ModelParameters<T>,
    batch: &'a Batch,
    rng: Option<ChaCha8Rng>,
    p_drop: f64,
}

impl<'a, T: Scalar> Forward<'a, T> {
    fn new(params: &'a ModelParameters<T>, batch: &'a Batch, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Forward {
            params,
            batch,
            rng,
            p_drop: params.config().dropout,
        }
    }

    fn drop(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        dropout(x, self.p_drop, self.rng.as_mut())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &mut self,
        x: &[T],
        gain: &Tensor<T>,
        w: &Attention<T>,
        memory: Option<&[T]>,
        shape: AttnShape,
        key_lens: &[usize],
        causal: bool,
        bias: Option<Bias<'_, T>>,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.params.config().d_model;
        let (normed, inv_rms) = rms_norm(x, gain.data(), d);
        let q = linear(&normed, &w.q);
        let kv_src = memory.unwrap_or(&normed);
        let k = linear(kv_src, &w.k);
        let v = linear(kv_src, &w.v);
        let (ctx, probs) = attention(&q, &k, &v, shape, key_lens, causal, bias);
        let mut out = linear(&ctx, &w.o);
        let drop = self.drop(&mut out);
        (
            out,
            AttnCache {
                inv_rms,
                normed,
                q,
                k,
                v,
                probs,
                ctx,
                drop,
            },
        )
    }

    fn ffn_block(
        &mut self,
        x: &[T],
        gain: &Tensor<T>,
        ffn: &super::params::FeedForward<T>,
    ) -> (Vec<T>, FfnCache<T>) {
        let d = self.params.config().d_model;
        let (normed, inv_rms) = rms_norm(x, gain.data(), d);
        let pre = linear(&normed, &ffn.wi);
        let act: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        let mut out = linear(&act, &ffn.wo);
        let drop = self.drop(&mut out);
        (
            out,
            FfnCache {
                inv_rms,
                normed,
                pre,
                act,
                drop,
            },
        )
    }

    fn run(mut self) -> (Logits<T>, Tape<T>) {
        let params = self.params;
        let batch = self.batch;
        let cfg = params.config().clone();
        let d = cfg.d_model;
        let (b, s, t) = (batch.batch_size, batch.src_len, batch.tgt_len);
        let enc_buckets = bucket_table(s, s, true, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
        let dec_buckets = bucket_table(t, t, false, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);

        // Encoder.
        let mut x = embed(&params.embedding, &batch.src, d);
        let src_drop = self.drop(&mut x);
        let enc_shape = AttnShape {
            batch: b,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            q_len: s,
            k_len: s,
        };
        let mut encoder = Vec::with_capacity(params.encoder_layers.len());
        for layer in &params.encoder_layers {
            let input = x.clone();
            let bias = Bias {
                table: params.encoder_rel_bias.data(),
                buckets: &enc_buckets,
            };
            let (a, attn) = self.attention_block(
                &x,
                &layer.attn_norm,
                &layer.attn,
                None,
                enc_shape,
                &batch.src_lens,
                false,
                Some(bias),
            );
            add_in_place(&mut x, &a);
            let mid = x.clone();
            let (f, ffn) = self.ffn_block(&x, &layer.ffn_norm, &layer.ffn);
            add_in_place(&mut x, &f);
            encoder.push(EncoderLayerCache {
                input,
                attn,
                mid,
                ffn,
            });
        }
        let (enc_out, enc_final_inv) = rms_norm(&x, params.encoder_norm.data(), d);
        let enc_final_in = x;

        // Decoder.
        let mut y = embed(&params.embedding, &batch.tgt_in, d);
        let tgt_drop = self.drop(&mut y);
        let self_shape = AttnShape {
            batch: b,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            q_len: t,
            k_len: t,
        };
        let cross_shape = AttnShape { k_len: s, ..self_shape };
        let mut decoder = Vec::with_capacity(params.decoder_layers.len());
        for layer in &params.decoder_layers {
            let input = y.clone();
            let bias = Bias {
                table: params.decoder_rel_bias.data(),
                buckets: &dec_buckets,
            };
            let (a, self_attn) = self.attention_block(
                &y,
                &layer.self_norm,
                &layer.self_attn,
                None,
                self_shape,
                &batch.tgt_lens,
                true,
                Some(bias),
            );
            add_in_place(&mut y, &a);
            let after_self = y.clone();
            let (c, cross) = self.attention_block(
                &y,
                &layer.cross_norm,
                &layer.cross_attn,
                Some(&enc_out),
                cross_shape,
                &batch.src_lens,
                false,
                None,
            );
            add_in_place(&mut y, &c);
            let after_cross = y.clone();
            let (f, ffn) = self.ffn_block(&y, &layer.ffn_norm, &layer.ffn);
            add_in_place(&mut y, &f);
            decoder.push(DecoderLayerCache {
                input,
                self_attn,
                after_self,
                cross,
                after_cross,
                ffn,
            });
        }
        let (dec_out, dec_final_inv) = rms_norm(&y, params.decoder_norm.data(), d);
        let dec_final_in = y;

        let vocab = cfg.vocab_size;
        let mut logits = vec![T::zero(); b * t * vocab];
        matmul(
            &mut logits,
            &dec_out,
            params.embedding.data(),
            b * t,
            d,
            vocab,
            false,
            true,
            false,
        );
        let scale = output_scale::<T>(d);
        logits.iter_mut().for_each(|v| *v = *v * scale);

        (
            Logits {
                batch_size: b,
                tgt_len: t,
                vocab,
                data: logits,
            },
            Tape {
                src_drop,
                encoder,
                enc_final_in,
                enc_final_inv,
                enc_out,
                tgt_drop,
                decoder,
                dec_final_in,
                dec_final_inv,
                dec_out,
                enc_buckets,
                dec_buckets,
            },
        )
    }
}

/// Tied output projection is rescaled by `d_model^-1/2`.
pub(crate) fn output_scale<T: Scalar>(d: usize) -> T {
    T::of(1.0 / (d as f64).sqrt())
}

/// Logits for every target position of `batch`.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Batch,
    mode: Mode,
) -> Result<Logits<T>> {
    validate_batch(params, batch)?;
    Ok(Forward::new(params, batch, mode).run().0)
}

/// Like [`forward`], also returning every attention weight matrix.
pub fn forward_traced<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Batch,
    mode: Mode,
) -> Result<(Logits<T>, AttentionTrace<T>)> {
    validate_batch(params, batch)?;
    let (logits, tape) = Forward::new(params, batch, mode).run();
    let trace = AttentionTrace {
        encoder_self: tape.encoder.into_iter().map(|l| l.attn.probs).collect(),
        decoder_self: tape
            .decoder
            .iter()
            .map(|l| l.self_attn.probs.clone())
            .collect(),
        decoder_cross: tape.decoder.into_iter().map(|l| l.cross.probs).collect(),
    };
    Ok((logits, trace))
}

/// Per-row negative log-likelihood and softmax, computed stably.
fn row_nll<T: Scalar>(row: &[T], target: usize) -> (f64, Vec<f64>) {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let nll = sum.ln() + max - row[target].as_f64();
    (nll, exps.into_iter().map(|e| e / sum).collect())
}

/// Mean token negative log-likelihood over the valid target positions, and their count.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Logits<T>,
    tgt_out: &[u32],
    tgt_mask: &[bool],
) -> Result<(f64, usize)> {
    let rows = logits.batch_size * logits.tgt_len;
    if tgt_out.len() != rows || tgt_mask.len() != rows {
        return Err(Error::Shape("targets do not match logits".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, (&tgt, &valid)) in tgt_out.iter().zip(tgt_mask).enumerate() {
        if !valid {
            continue;
        }
        let row = &logits.data[r * logits.vocab..(r + 1) * logits.vocab];
        total += row_nll(row, tgt as usize).0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok((total / count as f64, count))
}

/// Summed token NLL, its token count, and the exact gradient of the sum.
pub fn backward_sum<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Batch,
    mode: Mode,
) -> Result<(f64, usize, Gradients<T>)> {
    validate_batch(params, batch)?;
    if batch.target_tokens() == 0 {
        return Err(Error::DegenerateBatch);
    }
    let (logits, tape) = Forward::new(params, batch, mode).run();
    let vocab = logits.vocab;
    let mut dlogits = vec![T::zero(); logits.data.len()];
    let mut total = 0.0;
    let mut count = 0;
    for (r, (&tgt, &valid)) in batch.tgt_out.iter().zip(&batch.tgt_mask).enumerate() {
        if !valid {
            continue;
        }
        let (nll, probs) = row_nll(&logits.data[r * vocab..(r + 1) * vocab], tgt as usize);
        total += nll;
        count += 1;
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (dv, p) in drow.iter_mut().zip(probs) {
            *dv = T::of(p);
        }
        drow[tgt as usize] = drow[tgt as usize] - T::one();
    }
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let grads = backprop(params, batch, &tape, dlogits);
    Ok((total, count, grads))
}

/// Mean token loss, token count, and the gradient of the mean.
pub fn backward<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Batch,
    mode: Mode,
) -> Result<(f64, usize, Gradients<T>)> {
    let (total, count, mut grads) = backward_sum(params, batch, mode)?;
    grads.scale(T::of(1.0 / count as f64));
    Ok((total / count as f64, count, grads))
}

struct AttnGrads<T> {
    /// Gradient w.r.t. the block's residual input, through the norm.
    dx: Vec<T>,
    /// Gradient w.r.t. the cross-attention memory (encoder output).
    dmemory: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn attention_block_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    gain: &Tensor<T>,
    w: &Attention<T>,
    cache: &AttnCache<T>,
    memory: Option<&[T]>,
    shape: AttnShape,
    key_lens: &[usize],
    causal: bool,
    bias: Option<(&mut Tensor<T>, &[usize])>,
    dgain: &mut Tensor<T>,
    dw: &mut Attention<T>,
    d: usize,
) -> AttnGrads<T> {
    let mut dproj = dout.to_vec();
    apply_mask(&mut dproj, cache.drop.as_ref());
    let mut dctx = vec![T::zero(); cache.ctx.len()];
    linear_backward(&dproj, &cache.ctx, &w.o, Some(&mut dctx), &mut dw.o);
    let mut dq = vec![T::zero(); cache.q.len()];
    let mut dk = vec![T::zero(); cache.k.len()];
    let mut dv = vec![T::zero(); cache.v.len()];
    attention_backward(
        &dctx,
        &cache.q,
        &cache.k,
        &cache.v,
        &cache.probs,
        shape,
        key_lens,
        causal,
        &mut dq,
        &mut dk,
        &mut dv,
        bias.map(|(t, b)| (t.data_mut(), b)),
    );
    let mut dnormed = vec![T::zero(); cache.normed.len()];
    linear_backward(&dq, &cache.normed, &w.q, Some(&mut dnormed), &mut dw.q);
    let dmemory = match memory {
        Some(mem) => {
            let mut dmem = vec![T::zero(); mem.len()];
            linear_backward(&dk, mem, &w.k, Some(&mut dmem), &mut dw.k);
            linear_backward(&dv, mem, &w.v, Some(&mut dmem), &mut dw.v);
            Some(dmem)
        }
        None => {
            linear_backward(&dk, &cache.normed, &w.k, Some(&mut dnormed), &mut dw.k);
            linear_backward(&dv, &cache.normed, &w.v, Some(&mut dnormed), &mut dw.v);
            None
        }
    };
    let mut dx = vec![T::zero(); x.len()];
    rms_norm_backward(
        &dnormed,
        x,
        gain.data(),
        &cache.inv_rms,
        d,
        &mut dx,
        dgain.data_mut(),
    );
    AttnGrads { dx, dmemory }
}

fn ffn_block_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    gain: &Tensor<T>,
    ffn: &super::params::FeedForward<T>,
    cache: &FfnCache<T>,
    dgain: &mut Tensor<T>,
    dffn: &mut super::params::FeedForward<T>,
    d: usize,
) -> Vec<T> {
    let mut dproj = dout.to_vec();
    apply_mask(&mut dproj, cache.drop.as_ref());
    let mut dact = vec![T::zero(); cache.act.len()];
    linear_backward(&dproj, &cache.act, &ffn.wo, Some(&mut dact), &mut dffn.wo);
    for (g, &pre) in dact.iter_mut().zip(&cache.pre) {
        if pre <= T::zero() {
            *g = T::zero();
        }
    }
    let mut dnormed = vec![T::zero(); cache.normed.len()];
    linear_backward(&dact, &cache.normed, &ffn.wi, Some(&mut dnormed), &mut dffn.wi);
    let mut dx = vec![T::zero(); x.len()];
    rms_norm_backward(
        &dnormed,
        x,
        gain.data(),
        &cache.inv_rms,
        d,
        &mut dx,
        dgain.data_mut(),
    );
    dx
}

fn scatter_embedding<T: Scalar>(dembedding: &mut Tensor<T>, ids: &[u32], dx: &[T], d: usize) {
    let data = dembedding.data_mut();
    for (row, &id) in dx.chunks_exact(d).zip(ids) {
        let off = id as usize * d;
        for (g, &v) in data[off..off + d].iter_mut().zip(row) {
            *g = *g + v;
        }
    }
}

fn backprop<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Batch,
    tape: &Tape<T>,
    dlogits: Vec<T>,
) -> Gradients<T> {
    let cfg = params.config();
    let d = cfg.d_model;
    let (b, s, t) = (batch.batch_size, batch.src_len, batch.tgt_len);
    let vocab = cfg.vocab_size;
    let mut grads = params.zeros_like();
    let scale = output_scale::<T>(d);

    // Output projection: logits = scale * dec_out * E^T.
    let mut dl = dlogits;
    dl.iter_mut().for_each(|v| *v = *v * scale);
    let mut ddec_out = vec![T::zero(); b * t * d];
    matmul(
        &mut ddec_out,
        &dl,
        params.embedding.data(),
        b * t,
        vocab,
        d,
        false,
        false,
        false,
    );
    matmul(
        grads.embedding.data_mut(),
        &dl,
        &tape.dec_out,
        vocab,
        b * t,
        d,
        true,
        false,
        true,
    );

    let mut dy = vec![T::zero(); b * t * d];
    rms_norm_backward(
        &ddec_out,
        &tape.dec_final_in,
        params.decoder_norm.data(),
        &tape.dec_final_inv,
        d,
        &mut dy,
        grads.decoder_norm.data_mut(),
    );

    let self_shape = AttnShape {
        batch: b,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        q_len: t,
        k_len: t,
    };
    let cross_shape = AttnShape { k_len: s, ..self_shape };
    let mut denc_out = vec![T::zero(); b * s * d];

    for (li, layer) in params.decoder_layers.iter().enumerate().rev() {
        let cache = &tape.decoder[li];
        let g = &mut grads.decoder_layers[li];
        // Residual: y_out = after_cross + ffn(after_cross).
        let dffn_in = ffn_block_backward(
            &dy,
            &cache.after_cross,
            &layer.ffn_norm,
            &layer.ffn,
            &cache.ffn,
            &mut g.ffn_norm,
            &mut g.ffn,
            d,
        );
        add_in_place(&mut dy, &dffn_in);
        let cross = attention_block_backward(
            &dy,
            &cache.after_self,
            &layer.cross_norm,
            &layer.cross_attn,
            &cache.cross,
            Some(&tape.enc_out),
            cross_shape,
            &batch.src_lens,
            false,
            None,
            &mut g.cross_norm,
            &mut g.cross_attn,
            d,
        );
        add_in_place(&mut dy, &cross.dx);
        if let Some(dmem) = cross.dmemory {
            add_in_place(&mut denc_out, &dmem);
        }
        let selfa = attention_block_backward(
            &dy,
            &cache.input,
            &layer.self_norm,
            &layer.self_attn,
            &cache.self_attn,
            None,
            self_shape,
            &batch.tgt_lens,
            true,
            Some((&mut grads.decoder_rel_bias, &tape.dec_buckets)),
            &mut g.self_norm,
            &mut g.self_attn,
            d,
        );
        add_in_place(&mut dy, &selfa.dx);
    }
    apply_mask(&mut dy, tape.tgt_drop.as_ref());
    scatter_embedding(&mut grads.embedding, &batch.tgt_in, &dy, d);

    let mut dx = vec![T::zero(); b * s * d];
    rms_norm_backward(
        &denc_out,
        &tape.enc_final_in,
        params.encoder_norm.data(),
        &tape.enc_final_inv,
        d,
        &mut dx,
        grads.encoder_norm.data_mut(),
    );
    let enc_shape = AttnShape { q_len: s, k_len: s, ..self_shape };
    for (li, layer) in params.encoder_layers.iter().enumerate().rev() {
        let cache = &tape.encoder[li];
        let g = &mut grads.encoder_layers[li];
        let dffn_in = ffn_block_backward(
            &dx,
            &cache.mid,
            &layer.ffn_norm,
            &layer.ffn,
            &cache.ffn,
            &mut g.ffn_norm,
            &mut g.ffn,
            d,
        );
        add_in_place(&mut dx, &dffn_in);
        let attn = attention_block_backward(
            &dx,
            &cache.input,
            &layer.attn_norm,
            &layer.attn,
            &cache.attn,
            None,
            enc_shape,
            &batch.src_lens,
            false,
            Some((&mut grads.encoder_rel_bias, &tape.enc_buckets)),
            &mut g.attn_norm,
            &mut g.attn,
            d,
        );
        add_in_place(&mut dx, &attn.dx);
    }
    apply_mask(&mut dx, tape.src_drop.as_ref());
    scatter_embedding(&mut grads.embedding, &batch.src, &dx, d);
    grads
}
