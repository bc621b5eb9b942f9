//! Independent oracles shared by the module tests and the acceptance runner.
//! Each check returns a one-line summary on success and a reason on failure.
#![allow(dead_code)]

use std::collections::HashMap;

use g2p_core::codec::{decode, encode, mask_language_tags, LanguageTag, TokenSequence, BOS, EOS};
use g2p_core::decode::{search, DecodeConfig, NeuralScorer, StepScorer};
use g2p_core::metrics::{levenshtein, phone_error_rate, PhoneSequence};
use g2p_core::nn::{backward, cross_entropy_loss, forward, Batch, Mode, ModelConfig, ModelParameters};
use g2p_core::optim::{adamw_step, AdamWConfig, AdamWState};
use g2p_core::Result;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Every string over `0..alphabet` of length at most `max_len`, shortest first.
pub fn all_strings(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Edit distances between all pairs of `strings` by the first-symbol recursion,
/// memoized over the whole set. Requires every suffix of a member to precede it.
pub fn distance_table(strings: &[Vec<u8>]) -> Vec<u8> {
    let index: HashMap<&[u8], usize> = strings.iter().enumerate().map(|(i, s)| (&s[..], i)).collect();
    let tail: Vec<Option<usize>> = strings
        .iter()
        .map(|s| s.split_first().map(|(_, rest)| index[rest]))
        .collect();
    let n = strings.len();
    let mut d = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = match (tail[i], tail[j]) {
                (None, _) => strings[j].len() as u8,
                (_, None) => strings[i].len() as u8,
                (Some(ti), Some(tj)) => {
                    let sub = d[ti * n + tj] + u8::from(strings[i][0] != strings[j][0]);
                    sub.min(d[ti * n + j] + 1).min(d[i * n + tj] + 1)
                }
            };
        }
    }
    d
}

/// Levenshtein distance and single-reference PER against the memoized oracle,
/// for every pair of strings up to length 6 over a four-letter alphabet.
pub fn levenshtein_exhaustive() -> Check {
    let strings = all_strings(6, 4);
    let n = strings.len();
    let d = distance_table(&strings);
    let phones: Vec<PhoneSequence> = strings
        .iter()
        .map(|s| PhoneSequence::new(s.iter().map(|c| ((b'a' + c) as char).to_string()).collect()))
        .collect();
    for i in 0..n {
        for j in 0..n {
            let want = usize::from(d[i * n + j]);
            let got = levenshtein(&strings[i], &strings[j]);
            ensure!(got == want, "distance {:?} {:?}: {got} vs oracle {want}", strings[i], strings[j]);
            if !strings[j].is_empty() {
                let per = phone_error_rate(&phones[i], std::slice::from_ref(&phones[j]))
                    .map_err(|e| e.to_string())?;
                let expected = 100.0 * want as f64 / strings[j].len() as f64;
                ensure!(per == expected, "PER {:?} vs {:?}: {per} vs {expected}", strings[i], strings[j]);
            }
        }
    }
    Ok(format!("{} pairs", n * n))
}

/// Decoder with sharpened outputs so search paths actually differ.
pub fn search_model(seed: u64) -> ModelParameters<f64> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        rel_pos_buckets: 8,
        rel_pos_max_distance: 16,
        max_tgt_len: 24,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut p = ModelParameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for v in p.embedding.data_mut() {
        *v *= 3.0;
    }
    for (name, t) in p.named_tensors_mut() {
        if name.ends_with("rel_bias") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    p
}

/// Neural scorer restricted to a handful of tokens, so every path can be enumerated.
pub struct Restricted<'a> {
    pub inner: NeuralScorer<'a, f64>,
    pub allowed: Vec<u32>,
}

impl StepScorer for Restricted<'_> {
    type State = <NeuralScorer<'static, f64> as StepScorer>::State;

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn advance(&mut self, rows: Vec<(Self::State, u32)>) -> Result<Vec<(Self::State, Vec<f64>)>> {
        let out = self.inner.advance(rows)?;
        Ok(out
            .into_iter()
            .map(|(s, mut lp)| {
                for (t, v) in lp.iter_mut().enumerate() {
                    if !self.allowed.contains(&(t as u32)) {
                        *v = f64::NEG_INFINITY;
                    }
                }
                (s, lp)
            })
            .collect())
    }
}

/// All finished and length-capped paths with their log-probabilities, best first.
pub fn enumerate_paths(scorer: &mut Restricted<'_>, max_len: usize) -> Vec<(Vec<u32>, f64, bool)> {
    let mut out = Vec::new();
    let init = scorer.inner.initial_states().pop().unwrap();
    let mut frontier = vec![(init, BOS, Vec::<u32>::new(), 0.0)];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (state, fed, tokens, lp) in frontier {
            let (state, row) = scorer.advance(vec![(state, fed)]).unwrap().pop().unwrap();
            for &t in &scorer.allowed.clone() {
                let l = lp + row[t as usize];
                if t == EOS {
                    out.push((tokens.clone(), l, true));
                } else {
                    let mut tk = tokens.clone();
                    tk.push(t);
                    if step + 1 == max_len {
                        out.push((tk, l, false));
                    } else {
                        next.push((state.clone(), t, tk, l));
                    }
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// A beam wide enough to hold every path reproduces exhaustive enumeration, and
/// no narrower beam beats the exhaustive optimum.
pub fn beam_matches_exhaustive(seed: u64, word: &str, letters: &str, max_len: usize) -> Check {
    let p = search_model(seed);
    let src = encode(word, Some(&LanguageTag::new("ab").unwrap())).map_err(|e| e.to_string())?;
    let mut allowed = vec![EOS];
    allowed.extend(letters.bytes().map(|b| u32::from(b) + 3));
    let scorer = || Restricted {
        inner: NeuralScorer::new(&p, &[&src]).unwrap(),
        allowed: allowed.clone(),
    };
    let all = enumerate_paths(&mut scorer(), max_len);
    let mut wide = scorer();
    let initial = wide.inner.initial_states();
    let cfg = DecodeConfig {
        beam_size: all.len() + 10,
        max_len,
        length_penalty: 0.0,
    };
    let hyps = search(&mut wide, initial, &cfg).map_err(|e| e.to_string())?.pop().unwrap();
    ensure!(hyps.len() == all.len(), "wide beam kept {} of {} paths", hyps.len(), all.len());
    for (h, (tokens, lp, finished)) in hyps.iter().zip(&all) {
        ensure!(&h.tokens == tokens && h.finished == *finished, "path order differs at {tokens:?}");
        ensure!((h.log_prob - lp).abs() < 1e-9, "score {} vs {lp}", h.log_prob);
    }
    for k in 1..=6 {
        let mut narrow = scorer();
        let initial = narrow.inner.initial_states();
        let cfg = DecodeConfig {
            beam_size: k,
            max_len,
            length_penalty: 0.0,
        };
        let hyps = search(&mut narrow, initial, &cfg).map_err(|e| e.to_string())?.pop().unwrap();
        ensure!(hyps[0].log_prob <= all[0].1 + 1e-12, "beam {k} beats the exhaustive optimum");
    }
    Ok(format!("{} paths over {} tokens", all.len(), allowed.len()))
}

pub fn fd_config(dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        rel_pos_buckets: 8,
        rel_pos_max_distance: 16,
        dropout,
        ..ModelConfig::default()
    }
}

/// Initial parameters with perturbed norm gains and position biases, so their
/// gradients are exercised.
pub fn fd_params(cfg: &ModelConfig, seed: u64) -> ModelParameters<f64> {
    let mut p = ModelParameters::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (name, t) in p.named_tensors_mut() {
        if name.ends_with("norm") || name.ends_with("rel_bias") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn fd_pair(src: &str, tgt: &str) -> (TokenSequence, TokenSequence) {
    let tag = LanguageTag::new("ab").unwrap();
    (encode(src, Some(&tag)).unwrap(), encode(tgt, None).unwrap())
}

pub fn fd_batch() -> Batch {
    Batch::new(&[fd_pair("kat", "kæt"), fd_pair("shoe", "ʃuː"), fd_pair("a", "ə")]).unwrap()
}

fn loss_of(p: &ModelParameters<f64>, batch: &Batch, mode: Mode) -> f64 {
    let logits = forward(p, batch, mode).unwrap();
    cross_entropy_loss(&logits, &batch.tgt_out, &batch.tgt_mask).unwrap().0
}

/// Central differences on `coordinates` random parameters; embedding rows are
/// drawn only from tokens present in the batch.
pub fn finite_differences(mode: Mode, dropout: f64, seed: u64, coordinates: usize) -> Check {
    let cfg = fd_config(dropout);
    let params = fd_params(&cfg, seed);
    let batch = fd_batch();
    let (_, _, grads) = backward(&params, &batch, mode).map_err(|e| e.to_string())?;
    let used: Vec<u32> = batch.src.iter().chain(&batch.tgt_in).chain(&batch.tgt_out).copied().collect();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..coordinates {
        let ti = rng.gen_range(0..names.len());
        let len = params.named_tensors()[ti].1.len();
        let idx = if names[ti] == "embedding" {
            let id = used[rng.gen_range(0..used.len())] as usize;
            id * cfg.d_model + rng.gen_range(0..cfg.d_model)
        } else {
            rng.gen_range(0..len)
        };
        let mut plus = params.clone();
        plus.named_tensors_mut()[ti].1.data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.named_tensors_mut()[ti].1.data_mut()[idx] -= h;
        let numeric = (loss_of(&plus, &batch, mode) - loss_of(&minus, &batch, mode)) / (2.0 * h);
        let analytic = grads.named_tensors()[ti].1.data()[idx];
        let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-7);
        worst = worst.max(rel);
        ensure!(rel < 1e-4, "{}[{idx}]: numeric {numeric:e} analytic {analytic:e} rel {rel:e}", names[ti]);
    }
    Ok(format!("{coordinates} coordinates, worst relative error {worst:.1e}"))
}

/// Textbook Adam with decoupled decay on one scalar.
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, w: f64, g: f64, c: &AdamWConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        w * (1.0 - c.learning_rate * c.weight_decay) - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps)
    }
}

fn flat(p: &ModelParameters<f64>) -> Vec<f64> {
    p.named_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Several AdamW steps with random gradients against per-element scalar oracles.
pub fn adamw_oracle(steps: usize) -> Check {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut params = ModelParameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut state = AdamWState::new(&params);
    let opt = AdamWConfig {
        learning_rate: 3e-3,
        weight_decay: 0.05,
        ..AdamWConfig::default()
    };
    let mut expected = flat(&params);
    let mut oracles: Vec<ScalarAdam> = expected.iter().map(|_| ScalarAdam::new()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..steps {
        let mut grads = params.zeros_like();
        for (_, t) in grads.named_tensors_mut() {
            for g in t.data_mut() {
                *g = rng.gen_range(-2.0..2.0);
            }
        }
        let g = flat(&grads);
        adamw_step(&mut params, &grads, &mut state, &opt).map_err(|e| e.to_string())?;
        for ((w, g), o) in expected.iter_mut().zip(&g).zip(&mut oracles) {
            *w = o.step(*w, *g, &opt);
        }
    }
    let worst = flat(&params).iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst < 1e-10, "max deviation {worst:e}");
    ensure!(state.step == steps as u64, "step counter {}", state.step);
    Ok(format!("{} parameters x {steps} steps, max deviation {worst:.1e}", expected.len()))
}

/// Central interval of Binomial(n, p) holding `mass`, from the exact pmf.
pub fn binomial_central_interval(n: u64, p: f64, mass: f64) -> (u64, u64) {
    let mut ln_pmf = Vec::with_capacity(n as usize + 1);
    let mut ln_choose = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        ln_pmf.push(ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln());
    }
    let tail = (1.0 - mass) / 2.0;
    let mut acc = 0.0;
    let mut lo = 0;
    while acc + ln_pmf[lo as usize].exp() <= tail {
        acc += ln_pmf[lo as usize].exp();
        lo += 1;
    }
    let mut acc = 0.0;
    let mut hi = n;
    while acc + ln_pmf[hi as usize].exp() <= tail {
        acc += ln_pmf[hi as usize].exp();
        hi -= 1;
    }
    (lo, hi)
}

/// Masked-tag counts over 100,000 examples at rate 0.15, for several seeds.
pub fn masking_rate(seeds: &[u64]) -> Check {
    let n = 100_000u64;
    let (lo, hi) = binomial_central_interval(n, 0.15, 0.9999);
    let entries: Vec<(u32, LanguageTag)> = (0..n as u32).map(|i| (i, LanguageTag::new("eng-us").unwrap())).collect();
    let mut counts = Vec::new();
    for &seed in seeds {
        let masked = mask_language_tags(&entries, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
        let count = masked.iter().filter(|(_, t)| t.is_wildcard()).count() as u64;
        ensure!((lo..=hi).contains(&count), "seed {seed}: {count} outside [{lo}, {hi}]");
        counts.push(count);
    }
    Ok(format!("counts {counts:?} within [{lo}, {hi}]"))
}

pub fn fuzzed_word() -> impl Strategy<Value = String> {
    "[^\t\n\r]{1,24}"
}

pub fn fuzzed_tag() -> impl Strategy<Value = LanguageTag> {
    "[a-z0-9-]{2,16}".prop_map(|s| LanguageTag::new(s).unwrap())
}

/// Encode then decode on `cases` fuzzed Unicode strings.
pub fn codec_round_trip(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&fuzzed_word(), |w| {
            let d = decode(encode(&w, None).unwrap().ids());
            prop_assert!(!d.lossy);
            prop_assert_eq!(d.text, w);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} strings"))
}

/// Tagged encoding equals encoding the literal `<tag>:word` string.
pub fn prefix_framing(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&(fuzzed_word(), fuzzed_tag()), |(w, t)| {
            let framed = format!("{}{w}", t.prefix());
            prop_assert_eq!(encode(&w, Some(&t)).unwrap(), encode(&framed, None).unwrap());
            prop_assert_eq!(LanguageTag::from_prefix(&t.prefix()).unwrap(), t);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} (word, tag) pairs"))
}
