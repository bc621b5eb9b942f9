//! Eval-mode encoder plus a cached, one-token-at-a-time decoder.
//!
//! The arithmetic mirrors the batched forward pass operation for operation, so
//! stepping through a target reproduces teacher-forced logits.

use super::config::ModelConfig;
use super::model::{bucket_table, embed, output_scale};
use super::ops::{attention, linear, rms_norm, AttnShape, Bias};
use super::params::ModelParameters;
use super::position::relative_position_bucket;
use super::tensor::matmul;
use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Encoder output for one source, pre-projected into each decoder layer's
/// cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    len: usize,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

impl<T> EncodedSource<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Self-attention keys and values of every token fed so far.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    position: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> DecoderCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        DecoderCache {
            position: 0,
            keys: vec![Vec::new(); config.n_decoder_layers],
            values: vec![Vec::new(); config.n_decoder_layers],
        }
    }

    /// Number of tokens consumed.
    pub fn position(&self) -> usize {
        self.position
    }
}

/// Runs the encoder over `sources` as one padded batch.
pub fn encode_sources<T: Scalar>(
    params: &ModelParameters<T>,
    sources: &[&TokenSequence],
) -> Result<Vec<EncodedSource<T>>> {
    let cfg = params.config();
    let d = cfg.d_model;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let lens: Vec<usize> = sources.iter().map(|s| s.unpadded_len()).collect();
    let s = lens.iter().copied().max().unwrap_or(0);
    if s == 0 || lens.contains(&0) {
        return Err(Error::Shape("empty source sequence".into()));
    }
    if s > cfg.max_src_len {
        return Err(Error::Shape(format!(
            "source length {s} exceeds maximum {}",
            cfg.max_src_len
        )));
    }
    let b = sources.len();
    let mut ids = vec![crate::codec::PAD; b * s];
    for (row, src) in sources.iter().enumerate() {
        let src = &src.ids()[..lens[row]];
        if let Some(bad) = src.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} out of range")));
        }
        ids[row * s..row * s + src.len()].copy_from_slice(src);
    }
    let buckets = bucket_table(s, s, true, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
    let shape = AttnShape {
        batch: b,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        q_len: s,
        k_len: s,
    };
    let mut x = embed(&params.embedding, &ids, d);
    for layer in &params.encoder_layers {
        let (normed, _) = rms_norm(&x, layer.attn_norm.data(), d);
        let q = linear(&normed, &layer.attn.q);
        let k = linear(&normed, &layer.attn.k);
        let v = linear(&normed, &layer.attn.v);
        let bias = Bias {
            table: params.encoder_rel_bias.data(),
            buckets: &buckets,
        };
        let (ctx, _) = attention(&q, &k, &v, shape, &lens, false, Some(bias));
        add(&mut x, &linear(&ctx, &layer.attn.o));
        let (normed, _) = rms_norm(&x, layer.ffn_norm.data(), d);
        let mut h = linear(&normed, &layer.ffn.wi);
        h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        add(&mut x, &linear(&h, &layer.ffn.wo));
    }
    let (enc_out, _) = rms_norm(&x, params.encoder_norm.data(), d);

    let projected: Vec<(Vec<T>, Vec<T>)> = params
        .decoder_layers
        .iter()
        .map(|l| (linear(&enc_out, &l.cross_attn.k), linear(&enc_out, &l.cross_attn.v)))
        .collect();
    Ok((0..b)
        .map(|row| {
            let rows = row * s * d..(row * s + lens[row]) * d;
            EncodedSource {
                len: lens[row],
                cross_k: projected.iter().map(|(k, _)| k[rows.clone()].to_vec()).collect(),
                cross_v: projected.iter().map(|(_, v)| v[rows.clone()].to_vec()).collect(),
            }
        })
        .collect())
}

fn add<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

/// Attention of a single query row over `nk` cached key/value rows.
/// Same operation order as the batched kernel.
fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    nk: usize,
    heads: usize,
    bias: Option<(&[T], &dyn Fn(usize) -> usize)>,
    out: &mut [T],
) {
    let d = q.len();
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); nk];
    for h in 0..heads {
        let col = h * dh;
        let qrow = &q[col..col + dh];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let krow = &keys[j * d + col..][..dh];
            let mut dot = T::zero();
            for t in 0..dh {
                dot = dot + qrow[t] * krow[t];
            }
            let mut val = dot * scale;
            if let Some((table, bucket)) = &bias {
                val = val + table[bucket(j) * heads + h];
            }
            *s = val;
            if val > max {
                max = val;
            }
        }
        let mut sum = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum = sum + *s;
        }
        let orow = &mut out[col..col + dh];
        for (j, &s) in scores.iter().enumerate() {
            let p = s / sum;
            let vrow = &values[j * d + col..][..dh];
            for t in 0..dh {
                orow[t] = orow[t] + p * vrow[t];
            }
        }
    }
}

/// Feeds one token per row and returns `[rows x vocab]` logits for the next position.
pub fn decoder_step<T: Scalar>(
    params: &ModelParameters<T>,
    rows: &mut [(&EncodedSource<T>, &mut DecoderCache<T>, u32)],
) -> Result<Vec<T>> {
    let cfg = params.config();
    let d = cfg.d_model;
    let r = rows.len();
    if r == 0 {
        return Ok(Vec::new());
    }
    for (_, cache, token) in rows.iter() {
        if *token as usize >= cfg.vocab_size {
            return Err(Error::Shape(format!("token id {token} out of range")));
        }
        if cache.position >= cfg.max_tgt_len {
            return Err(Error::Shape(format!(
                "decoder position exceeds maximum {}",
                cfg.max_tgt_len
            )));
        }
    }
    let tokens: Vec<u32> = rows.iter().map(|(_, _, t)| *t).collect();
    let mut x = embed(&params.embedding, &tokens, d);
    for (li, layer) in params.decoder_layers.iter().enumerate() {
        let (normed, _) = rms_norm(&x, layer.self_norm.data(), d);
        let q = linear(&normed, &layer.self_attn.q);
        let k = linear(&normed, &layer.self_attn.k);
        let v = linear(&normed, &layer.self_attn.v);
        let mut ctx = vec![T::zero(); r * d];
        for (i, (_, cache, _)) in rows.iter_mut().enumerate() {
            cache.keys[li].extend_from_slice(&k[i * d..(i + 1) * d]);
            cache.values[li].extend_from_slice(&v[i * d..(i + 1) * d]);
            let pos = cache.position;
            let bucket = move |j: usize| {
                relative_position_bucket(
                    j as i64 - pos as i64,
                    false,
                    cfg.rel_pos_buckets,
                    cfg.rel_pos_max_distance,
                )
            };
            attend_row(
                &q[i * d..(i + 1) * d],
                &cache.keys[li],
                &cache.values[li],
                pos + 1,
                cfg.n_heads,
                Some((params.decoder_rel_bias.data(), &bucket)),
                &mut ctx[i * d..(i + 1) * d],
            );
        }
        add(&mut x, &linear(&ctx, &layer.self_attn.o));

        let (normed, _) = rms_norm(&x, layer.cross_norm.data(), d);
        let q = linear(&normed, &layer.cross_attn.q);
        let mut ctx = vec![T::zero(); r * d];
        for (i, (src, _, _)) in rows.iter().enumerate() {
            attend_row(
                &q[i * d..(i + 1) * d],
                &src.cross_k[li],
                &src.cross_v[li],
                src.len,
                cfg.n_heads,
                None,
                &mut ctx[i * d..(i + 1) * d],
            );
        }
        add(&mut x, &linear(&ctx, &layer.cross_attn.o));

        let (normed, _) = rms_norm(&x, layer.ffn_norm.data(), d);
        let mut h = linear(&normed, &layer.ffn.wi);
        h.iter_mut().for_each(|v| *v = v.max(T::zero()));
        add(&mut x, &linear(&h, &layer.ffn.wo));
    }
    for (_, cache, _) in rows.iter_mut() {
        cache.position += 1;
    }
    let (out, _) = rms_norm(&x, params.decoder_norm.data(), d);
    let vocab = cfg.vocab_size;
    let mut logits = vec![T::zero(); r * vocab];
    matmul(
        &mut logits,
        &out,
        params.embedding.data(),
        r,
        d,
        vocab,
        false,
        true,
        false,
    );
    let scale = output_scale::<T>(d);
    logits.iter_mut().for_each(|v| *v = *v * scale);
    Ok(logits)
}

/// Natural-log softmax of one logit row, in double precision.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}
