//! Training loop: seeded shuffling, wildcard-tag masking, gradient accumulation,
//! AdamW updates and development-set model selection.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, mask_language_tags, LanguageTag, TokenSequence, VOCAB_SIZE};
use crate::decode::{batch_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::metrics::{evaluate_with_tag, score_language, EvalReport, Prediction};
use crate::nn::{backward_sum, Batch, Mode, ModelConfig, ModelParameters};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Examples per optimizer step.
    pub effective_batch_size: usize,
    /// Examples per forward/backward pass; must divide `effective_batch_size`.
    pub micro_batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of examples whose language tag is replaced by the wildcard.
    pub unk_mask_rate: f64,
    pub seed: u64,
    /// Dev evaluation interval in optimizer steps; `None` evaluates after each epoch.
    pub eval_every: Option<usize>,
    /// Restricts training and dev data to these languages.
    pub language_filter: Option<Vec<LanguageTag>>,
    /// Stops after this many optimizer steps, mid-epoch if need be.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            effective_batch_size: 512,
            micro_batch_size: 32,
            epochs: 10,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            unk_mask_rate: 0.15,
            seed: 0,
            eval_every: None,
            language_filter: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.micro_batch_size == 0 || self.effective_batch_size == 0 {
            return fail("batch sizes must be positive");
        }
        if self.effective_batch_size % self.micro_batch_size != 0 {
            return fail("effective_batch_size must be a multiple of micro_batch_size");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.unk_mask_rate) {
            return fail("unk_mask_rate must lie in [0, 1]");
        }
        if self.eval_every == Some(0) {
            return fail("eval_every must be positive");
        }
        Ok(())
    }

    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch_size / self.micro_batch_size
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean token loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub dev_per: f64,
    pub dev_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EvalPoint>,
    /// Index into `history` of the selected checkpoint.
    pub selected: Option<usize>,
    pub epoch_seconds: Vec<f64>,
    pub languages: Vec<LanguageTag>,
    pub examples: usize,
    /// Pairs dropped because they exceed the model's sequence limits.
    pub skipped_overlong: usize,
    /// Masking rate actually applied (0 for single-language runs).
    pub unk_mask_rate: f64,
}

impl TrainReport {
    pub fn selected_point(&self) -> Option<&EvalPoint> {
        self.selected.map(|i| &self.history[i])
    }
}

/// Everything needed to continue a run: weights, optimizer, progress and the best weights so far.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub params: ModelParameters<T>,
    pub optimizer: AdamWState<T>,
    pub report: TrainReport,
    pub best: ModelParameters<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: ModelParameters<T>) -> Self {
        TrainState {
            optimizer: AdamWState::new(&params),
            best: params.clone(),
            params,
            report: TrainReport {
                history: Vec::new(),
                selected: None,
                epoch_seconds: Vec::new(),
                languages: Vec::new(),
                examples: 0,
                skipped_overlong: 0,
                unk_mask_rate: 0.0,
            },
        }
    }

    pub fn step(&self) -> usize {
        self.optimizer.step as usize
    }
}

/// SplitMix64 finalizer over a base seed and a path of stream indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base;
    for &p in path {
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

struct Example {
    tagged: TokenSequence,
    wildcard: TokenSequence,
    target: TokenSequence,
    language: LanguageTag,
}

/// Training and development data after filtering and encoding.
pub struct Prepared {
    examples: Vec<Example>,
    dev: Vec<Lexicon>,
    languages: Vec<LanguageTag>,
    skipped: usize,
    mask_rate: f64,
}

impl Prepared {
    pub fn new(
        model: &ModelConfig,
        config: &TrainConfig,
        train: &[Lexicon],
        dev: &[Lexicon],
    ) -> Result<Self> {
        if model.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model vocabulary {} does not match the byte vocabulary {VOCAB_SIZE}",
                model.vocab_size
            )));
        }
        let keep = |tag: &LanguageTag| {
            config
                .language_filter
                .as_ref()
                .map_or(true, |f| f.contains(tag))
        };
        let train: Vec<&Lexicon> = train.iter().filter(|l| keep(l.language())).collect();
        let languages: Vec<LanguageTag> = train
            .iter()
            .map(|l| l.language().clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(filter) = &config.language_filter {
            if let Some(missing) = filter.iter().find(|t| !languages.contains(t)) {
                return Err(Error::InsufficientData(format!(
                    "no training data for requested language {missing}"
                )));
            }
        }
        let dev: Vec<Lexicon> = dev.iter().filter(|l| keep(l.language())).cloned().collect();
        for lang in &languages {
            if !dev.iter().any(|l| l.language() == lang && !l.is_empty()) {
                return Err(Error::InsufficientData(format!(
                    "no development data for {lang}"
                )));
            }
        }
        let wildcard = LanguageTag::wildcard();
        let mut examples = Vec::new();
        let mut skipped = 0;
        let mut pairs: Vec<(&LanguageTag, &str, &str)> = train
            .iter()
            .flat_map(|l| {
                l.entries().iter().flat_map(move |e| {
                    e.pronunciations
                        .iter()
                        .map(move |p| (l.language(), e.word.as_str(), p.as_str()))
                })
            })
            .collect();
        pairs.sort();
        for (tag, word, pron) in pairs {
            let tagged = encode(word, Some(tag))?;
            let masked = encode(word, Some(&wildcard))?;
            let target = encode(pron, None)?;
            let src_len = tagged.len().max(masked.len());
            if src_len > model.max_src_len || target.len() > model.max_tgt_len {
                skipped += 1;
                continue;
            }
            examples.push(Example {
                tagged,
                wildcard: masked,
                target,
                language: tag.clone(),
            });
        }
        if examples.is_empty() && config.epochs > 0 {
            return Err(Error::InsufficientData("no usable training pairs".into()));
        }
        let mask_rate = if languages.len() == 1 {
            0.0
        } else {
            config.unk_mask_rate
        };
        Ok(Prepared {
            examples,
            dev,
            languages,
            skipped,
            mask_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.languages
    }

    /// Shuffled, masked (source, target) pairs for one epoch.
    fn epoch_pairs(&self, seed: u64, epoch: usize) -> Result<Vec<(TokenSequence, TokenSequence)>> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64])));
        let tagged: Vec<(usize, LanguageTag)> = order
            .iter()
            .map(|&i| (i, self.examples[i].language.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64]));
        let masked = mask_language_tags(&tagged, self.mask_rate, &mut rng)?;
        Ok(masked
            .into_iter()
            .map(|(i, tag)| {
                let e = &self.examples[i];
                let src = if tag.is_wildcard() { &e.wildcard } else { &e.tagged };
                (src.clone(), e.target.clone())
            })
            .collect())
    }
}

/// Summed-loss gradients over `pairs` split into micro-batches, normalized by
/// the total number of target tokens. Returns `(mean loss, tokens, gradients)`.
pub fn accumulate_gradients<T: Scalar>(
    params: &ModelParameters<T>,
    pairs: &[(TokenSequence, TokenSequence)],
    micro_batch_size: usize,
    dropout_seed: Option<u64>,
) -> Result<(f64, usize, ModelParameters<T>)> {
    if micro_batch_size == 0 {
        return Err(Error::Config("micro_batch_size must be positive".into()));
    }
    let mut total_loss = 0.0;
    let mut total_tokens = 0;
    let mut acc: Option<ModelParameters<T>> = None;
    for (m, chunk) in pairs.chunks(micro_batch_size).enumerate() {
        let batch = Batch::new(chunk)?;
        let mode = match dropout_seed {
            Some(seed) => Mode::Train {
                seed: derive_seed(seed, &[m as u64]),
            },
            None => Mode::Eval,
        };
        let (loss, tokens, grads) = backward_sum(params, &batch, mode)?;
        total_loss += loss;
        total_tokens += tokens;
        match acc.as_mut() {
            Some(a) => a.add_scaled(&grads, T::one()),
            None => acc = Some(grads),
        }
    }
    let mut grads = acc.ok_or(Error::DegenerateBatch)?;
    grads.scale(T::of(1.0 / total_tokens as f64));
    Ok((total_loss / total_tokens as f64, total_tokens, grads))
}

/// Greedy-decoded development PER/WER, macro-averaged over languages.
pub fn dev_eval<T: Scalar>(params: &ModelParameters<T>, dev: &[Lexicon]) -> Result<EvalReport> {
    let cfg = DecodeConfig::greedy(params.config().max_tgt_len);
    let mut rows = Vec::with_capacity(dev.len());
    for lexicon in dev {
        let sources = lexicon
            .entries()
            .iter()
            .map(|e| encode(&e.word, Some(lexicon.language())))
            .collect::<Result<Vec<_>>>()?;
        let predictions: Vec<Prediction> = batch_decode(params, &sources, &cfg)
            .into_iter()
            .map(|r| r.map(|h| h.into_iter().next().map(|h| h.text)))
            .collect::<Result<_>>()?;
        rows.push(score_language(lexicon, &predictions)?);
    }
    EvalReport::from_rows(rows)
}

/// Continues `state` until the configured epochs or step budget are used up.
///
/// `on_eval` sees the state after every development evaluation, which is
/// where periodic checkpoints belong; resuming from such a state with the same
/// data and config reproduces the uninterrupted run.
pub fn run<T: Scalar, F>(
    config: &TrainConfig,
    data: &Prepared,
    mut state: TrainState<T>,
    mut on_eval: F,
) -> Result<TrainState<T>>
where
    F: FnMut(&TrainState<T>) -> Result<()>,
{
    config.validate()?;
    state.report.languages = data.languages.clone();
    state.report.examples = data.examples.len();
    state.report.skipped_overlong = data.skipped;
    state.report.unk_mask_rate = data.mask_rate;
    if config.epochs == 0 || data.is_empty() {
        return Ok(state);
    }
    let steps_per_epoch = data.len().div_ceil(config.effective_batch_size);
    let total_steps = (steps_per_epoch * config.epochs).min(config.max_steps.unwrap_or(usize::MAX));
    let optimizer = config.optimizer();
    let mut loss_sum = 0.0;
    let mut loss_tokens = 0usize;
    let mut epoch_start = Instant::now();
    let mut epoch_pairs: Option<(usize, Vec<(TokenSequence, TokenSequence)>)> = None;

    while state.step() < total_steps {
        let step = state.step();
        let epoch = step / steps_per_epoch;
        let index = step % steps_per_epoch;
        if epoch_pairs.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_pairs = Some((epoch, data.epoch_pairs(config.seed, epoch)?));
            epoch_start = Instant::now();
        }
        let pairs = &epoch_pairs.as_ref().expect("set above").1;
        let lo = index * config.effective_batch_size;
        let hi = (lo + config.effective_batch_size).min(pairs.len());
        let mut slice = pairs[lo..hi].to_vec();
        // Similar lengths share micro-batches, which cuts padding.
        slice.sort_by_key(|(s, t)| (s.len(), t.len()));
        let (loss, tokens, grads) = accumulate_gradients(
            &state.params,
            &slice,
            config.micro_batch_size,
            Some(derive_seed(config.seed, &[3, step as u64])),
        )?;
        adamw_step(&mut state.params, &grads, &mut state.optimizer, &optimizer)?;
        loss_sum += loss * tokens as f64;
        loss_tokens += tokens;

        let done = state.step();
        let epoch_end = done % steps_per_epoch == 0;
        if epoch_end {
            state.report.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        }
        let scheduled = match config.eval_every {
            Some(n) => done % n == 0,
            None => epoch_end,
        };
        if scheduled || done == total_steps {
            let report = dev_eval(&state.params, &data.dev)?;
            state.report.history.push(EvalPoint {
                step: done,
                epoch: (done - 1) / steps_per_epoch,
                train_loss: loss_sum / loss_tokens as f64,
                dev_per: report.per,
                dev_wer: report.wer,
            });
            loss_sum = 0.0;
            loss_tokens = 0;
            let improved = match state.report.selected_point() {
                None => true,
                Some(best) => report.per < best.dev_per,
            };
            if improved {
                state.report.selected = Some(state.report.history.len() - 1);
                state.best = state.params.clone();
            }
            on_eval(&state)?;
        }
    }
    Ok(state)
}

/// Trains a fresh model and returns the best-dev-PER parameters with the report.
pub fn train<T: Scalar>(
    model: &ModelConfig,
    config: &TrainConfig,
    train: &[Lexicon],
    dev: &[Lexicon],
) -> Result<(ModelParameters<T>, TrainReport)> {
    config.validate()?;
    model.validate()?;
    let data = Prepared::new(model, config, train, dev)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let params = ModelParameters::init(model, &mut rng)?;
    let state = run(config, &data, TrainState::fresh(params), |_| Ok(()))?;
    Ok((state.best, state.report))
}

/// Continues training from `pretrained` with a fresh optimizer; the input is not modified.
pub fn finetune<T: Scalar>(
    pretrained: &ModelParameters<T>,
    model: &ModelConfig,
    config: &TrainConfig,
    train: &Lexicon,
    dev: &Lexicon,
) -> Result<(ModelParameters<T>, TrainReport)> {
    config.validate()?;
    pretrained.config().ensure_matches(model)?;
    let data = Prepared::new(
        model,
        config,
        std::slice::from_ref(train),
        std::slice::from_ref(dev),
    )?;
    let state = run(config, &data, TrainState::fresh(pretrained.clone()), |_| Ok(()))?;
    Ok((state.best, state.report))
}

/// Scores an unseen language by decoding every word behind the wildcard tag.
pub fn zero_shot_eval<T: Scalar>(
    params: &ModelParameters<T>,
    unseen: &Lexicon,
    decode: &DecodeConfig,
) -> Result<EvalReport> {
    evaluate_with_tag(
        params,
        std::slice::from_ref(unseen),
        decode,
        Some(&LanguageTag::wildcard()),
    )
}
