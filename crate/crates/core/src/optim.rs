//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ModelParameters};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Step count and first/second moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub first_moment: ModelParameters<T>,
    pub second_moment: ModelParameters<T>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        AdamWState {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One update: `w <- w (1 - lr wd)`, then the bias-corrected Adam delta.
///
/// Fails without touching anything when a gradient tensor is not finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    config: &AdamWConfig,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(name));
    }
    if params.config() != grads.config() || params.config() != state.first_moment.config() {
        return Err(Error::Shape("parameter, gradient and optimizer shapes differ".into()));
    }
    let step = state.step + 1;
    let lr = T::of(config.learning_rate);
    let decay = T::of(1.0 - config.learning_rate * config.weight_decay);
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let one_minus_b1 = T::of(1.0 - config.beta1);
    let one_minus_b2 = T::of(1.0 - config.beta2);
    let bias1 = T::of(1.0 - config.beta1.powf(step as f64));
    let bias2 = T::of(1.0 - config.beta2.powf(step as f64));
    let eps = T::of(config.eps);

    let grads = grads.named_tensors();
    let firsts = state.first_moment.named_tensors_mut();
    let seconds = state.second_moment.named_tensors_mut();
    for ((((_, w), (_, g)), (_, m)), (_, v)) in params
        .named_tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(firsts)
        .zip(seconds)
    {
        let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_minus_b1 * gi;
            v[i] = b2 * v[i] + one_minus_b2 * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParameters<f64> {
        ModelParameters::init(&ModelConfig::small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_gradient_with_decay_scales_weights() {
        let mut p = params();
        let original = p.clone();
        let grads = p.zeros_like();
        let mut state = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            learning_rate: 0.01,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
        let factor = 1.0 - 0.01 * 0.1;
        for ((_, a), (_, b)) in p.named_tensors().into_iter().zip(original.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * factor);
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = params();
        let original = p.clone();
        let grads = p.zeros_like();
        let mut state = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &grads, &mut state, &cfg).unwrap();
        assert_eq!(p, original);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = params();
        let mut grads = p.zeros_like();
        grads.decoder_layers[1].ffn.wo.data_mut()[3] = f64::NAN;
        let mut state = AdamWState::new(&p);
        let before = p.clone();
        match adamw_step(&mut p, &grads, &mut state, &AdamWConfig::default()) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "decoder.layer1.ffn.wo"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }
}
