use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard deviation of the initial embedding.
///
/// Rows are looked up by a one-hot input (fan-in 1), but the tied output
/// projection turns this deviation directly into the initial logit spread:
/// 0.5 keeps the expected initial loss within 0.125 nats of uniform while
/// starting far closer to useful logit magnitudes than 1/sqrt(d_model).
pub const EMBEDDING_STD: f64 = 0.5;

/// Query/key/value/output projections, each `[d_model x d_model]` applied as `x * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub o: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    /// `[d_model x d_ff]`
    pub wi: Tensor<T>,
    /// `[d_ff x d_model]`
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: Tensor<T>,
    pub attn: Attention<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: Tensor<T>,
    pub self_attn: Attention<T>,
    pub cross_norm: Tensor<T>,
    pub cross_attn: Attention<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: FeedForward<T>,
}

/// Every trainable tensor of one encoder-decoder model.
///
/// The same structure doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    config: ModelConfig,
    /// `[vocab x d_model]`, shared by both input embeddings and the output projection.
    pub embedding: Tensor<T>,
    /// `[buckets x heads]`
    pub encoder_rel_bias: Tensor<T>,
    pub encoder_layers: Vec<EncoderLayer<T>>,
    pub encoder_norm: Tensor<T>,
    pub decoder_rel_bias: Tensor<T>,
    pub decoder_layers: Vec<DecoderLayer<T>>,
    pub decoder_norm: Tensor<T>,
}

pub type Gradients<T> = ModelParameters<T>;

fn attention_zeros<T: Scalar>(d: usize) -> Attention<T> {
    Attention {
        q: Tensor::zeros(&[d, d]),
        k: Tensor::zeros(&[d, d]),
        v: Tensor::zeros(&[d, d]),
        o: Tensor::zeros(&[d, d]),
    }
}

fn ffn_zeros<T: Scalar>(d: usize, ff: usize) -> FeedForward<T> {
    FeedForward {
        wi: Tensor::zeros(&[d, ff]),
        wo: Tensor::zeros(&[ff, d]),
    }
}

impl<T: Scalar> ModelParameters<T> {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let heads = config.n_heads;
        let buckets = config.rel_pos_buckets;
        Ok(ModelParameters {
            config: config.clone(),
            embedding: Tensor::zeros(&[config.vocab_size, d]),
            encoder_rel_bias: Tensor::zeros(&[buckets, heads]),
            encoder_layers: (0..config.n_encoder_layers)
                .map(|_| EncoderLayer {
                    attn_norm: Tensor::zeros(&[d]),
                    attn: attention_zeros(d),
                    ffn_norm: Tensor::zeros(&[d]),
                    ffn: ffn_zeros(d, ff),
                })
                .collect(),
            encoder_norm: Tensor::zeros(&[d]),
            decoder_rel_bias: Tensor::zeros(&[buckets, heads]),
            decoder_layers: (0..config.n_decoder_layers)
                .map(|_| DecoderLayer {
                    self_norm: Tensor::zeros(&[d]),
                    self_attn: attention_zeros(d),
                    cross_norm: Tensor::zeros(&[d]),
                    cross_attn: attention_zeros(d),
                    ffn_norm: Tensor::zeros(&[d]),
                    ffn: ffn_zeros(d, ff),
                })
                .collect(),
            decoder_norm: Tensor::zeros(&[d]),
        })
    }

    /// Random initialization: matrices ~ N(0, 1/fan_in), embedding ~ N(0, EMBEDDING_STD^2),
    /// norm gains 1, position biases 0.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        for (name, tensor) in params.named_tensors_mut() {
            let shape = tensor.shape().to_vec();
            if name.ends_with("norm") {
                tensor.fill(T::one());
            } else if name.ends_with("rel_bias") {
                tensor.fill(T::zero());
            } else {
                let fan_in = shape[0];
                let std = if name == "embedding" {
                    EMBEDDING_STD
                } else {
                    1.0 / (fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std)
                    .expect("positive standard deviation");
                for v in tensor.data_mut() {
                    *v = T::of(normal.sample(rng));
                }
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated on construction")
    }

    /// Tensors in a fixed canonical order with dotted names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("encoder.rel_bias".to_string(), &self.encoder_rel_bias),
        ];
        for (i, l) in self.encoder_layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            out.push((format!("{p}.attn_norm"), &l.attn_norm));
            push_attention(&mut out, &format!("{p}.attn"), &l.attn);
            out.push((format!("{p}.ffn_norm"), &l.ffn_norm));
            out.push((format!("{p}.ffn.wi"), &l.ffn.wi));
            out.push((format!("{p}.ffn.wo"), &l.ffn.wo));
        }
        out.push(("encoder.final_norm".to_string(), &self.encoder_norm));
        out.push(("decoder.rel_bias".to_string(), &self.decoder_rel_bias));
        for (i, l) in self.decoder_layers.iter().enumerate() {
            let p = format!("decoder.layer{i}");
            out.push((format!("{p}.self_norm"), &l.self_norm));
            push_attention(&mut out, &format!("{p}.self_attn"), &l.self_attn);
            out.push((format!("{p}.cross_norm"), &l.cross_norm));
            push_attention(&mut out, &format!("{p}.cross_attn"), &l.cross_attn);
            out.push((format!("{p}.ffn_norm"), &l.ffn_norm));
            out.push((format!("{p}.ffn.wi"), &l.ffn.wi));
            out.push((format!("{p}.ffn.wo"), &l.ffn.wo));
        }
        out.push(("decoder.final_norm".to_string(), &self.decoder_norm));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embedding".to_string(), &mut self.embedding),
            ("encoder.rel_bias".to_string(), &mut self.encoder_rel_bias),
        ];
        for (i, l) in self.encoder_layers.iter_mut().enumerate() {
            let p = format!("encoder.layer{i}");
            out.push((format!("{p}.attn_norm"), &mut l.attn_norm));
            push_attention_mut(&mut out, &format!("{p}.attn"), &mut l.attn);
            out.push((format!("{p}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("{p}.ffn.wi"), &mut l.ffn.wi));
            out.push((format!("{p}.ffn.wo"), &mut l.ffn.wo));
        }
        out.push(("encoder.final_norm".to_string(), &mut self.encoder_norm));
        out.push(("decoder.rel_bias".to_string(), &mut self.decoder_rel_bias));
        for (i, l) in self.decoder_layers.iter_mut().enumerate() {
            let p = format!("decoder.layer{i}");
            out.push((format!("{p}.self_norm"), &mut l.self_norm));
            push_attention_mut(&mut out, &format!("{p}.self_attn"), &mut l.self_attn);
            out.push((format!("{p}.cross_norm"), &mut l.cross_norm));
            push_attention_mut(&mut out, &format!("{p}.cross_attn"), &mut l.cross_attn);
            out.push((format!("{p}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("{p}.ffn.wi"), &mut l.ffn.wi));
            out.push((format!("{p}.ffn.wo"), &mut l.ffn.wo));
        }
        out.push(("decoder.final_norm".to_string(), &mut self.decoder_norm));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(name, _)| name)
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for ((_, a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_scaled(b, alpha);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for (_, t) in self.named_tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let mut out = ModelParameters::<U>::zeros(&self.config).expect("valid config");
        for ((_, dst), (_, src)) in out.named_tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let slots = params.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (given_name, tensor)) in slots.into_iter().zip(tensors) {
            if name != given_name || slot.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor {given_name} {:?} does not match {name} {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }
}

fn push_attention<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, p: &str, a: &'a Attention<T>) {
    out.push((format!("{p}.q"), &a.q));
    out.push((format!("{p}.k"), &a.k));
    out.push((format!("{p}.v"), &a.v));
    out.push((format!("{p}.o"), &a.o));
}

fn push_attention_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    p: &str,
    a: &'a mut Attention<T>,
) {
    out.push((format!("{p}.q"), &mut a.q));
    out.push((format!("{p}.k"), &mut a.k));
    out.push((format!("{p}.v"), &mut a.v));
    out.push((format!("{p}.o"), &mut a.o));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::small();
        let a = ModelParameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ModelParameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = ModelParameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_values() {
        let cfg = ModelConfig::default();
        let p = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (name, t) in p.named_tensors() {
            assert!(t.is_finite(), "{name}");
            if name.ends_with("norm") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("rel_bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        // Empirical variance of a fan-in-scaled matrix.
        let wi = &p.encoder_layers[0].ffn.wi;
        let var = wi.data().iter().map(|v| v * v).sum::<f64>() / wi.len() as f64;
        assert!((var * 128.0 - 1.0).abs() < 0.05, "variance {var}");
        let e = p.embedding.data();
        let var = e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        assert!((var / (EMBEDDING_STD * EMBEDDING_STD) - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn names_are_unique_and_ordered_consistently() {
        let cfg = ModelConfig::small();
        let mut p = ModelParameters::<f32>::zeros(&cfg).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut_names: Vec<String> = p.named_tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 2 + 2 * 8 + 2 + 2 * 13 + 1);
    }

    #[test]
    fn from_named_round_trip_and_rejects_shape() {
        let cfg = ModelConfig::small();
        let p = ModelParameters::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let named: Vec<(String, Tensor<f32>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ModelParameters::from_named(&cfg, named.clone()).unwrap(), p);
        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[3, 3]);
        assert!(ModelParameters::from_named(&cfg, bad).is_err());
    }
}
