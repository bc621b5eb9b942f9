//! Greedy and beam-search decoding.
//!
//! Search is written against [`StepScorer`], so the same code drives the neural
//! decoder and small synthetic scorers used to check it exhaustively.

use serde::{Deserialize, Serialize};

use crate::codec::{decode, TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::incremental::{decoder_step, encode_sources, log_softmax, DecoderCache, EncodedSource};
use crate::nn::ModelParameters;
use crate::scalar::Scalar;

/// Sources decoded together per batched decoder call.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// GNMT length-penalty exponent; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 64,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam_size: 1,
            max_len,
            length_penalty: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.length_penalty.is_finite() && self.length_penalty >= 0.0) {
            return Err(Error::Config("length_penalty must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn score(&self, log_prob: f64, len: usize) -> f64 {
        if self.length_penalty == 0.0 {
            log_prob
        } else {
            log_prob / ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, EOS excluded.
    pub tokens: Vec<u32>,
    pub text: String,
    /// True when the bytes were not valid UTF-8 and had to be repaired.
    pub lossy: bool,
    /// Sum of token log-probabilities, EOS included when present.
    pub log_prob: f64,
    /// Ranking score after the length penalty.
    pub score: f64,
    /// False when the length limit cut the hypothesis before EOS.
    pub finished: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, log_prob: f64, score: f64, finished: bool) -> Self {
        let decoded = decode(&tokens);
        Hypothesis {
            tokens,
            text: decoded.text,
            lossy: decoded.lossy,
            log_prob,
            score,
            finished,
        }
    }
}

/// Supplies next-token log-probabilities for a set of partial hypotheses.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Feeds `token` to each state and returns the advanced state with the
    /// log-probability row for the following position.
    fn advance(&mut self, rows: Vec<(Self::State, u32)>) -> Result<Vec<(Self::State, Vec<f64>)>>;
}

/// Cached neural decoder over pre-encoded sources; a state is `(source index, cache)`.
pub struct NeuralScorer<'a, T: Scalar> {
    params: &'a ModelParameters<T>,
    sources: Vec<EncodedSource<T>>,
}

impl<'a, T: Scalar> NeuralScorer<'a, T> {
    pub fn new(params: &'a ModelParameters<T>, sources: &[&TokenSequence]) -> Result<Self> {
        Ok(NeuralScorer {
            params,
            sources: encode_sources(params, sources)?,
        })
    }

    pub fn initial_states(&self) -> Vec<(usize, DecoderCache<T>)> {
        (0..self.sources.len())
            .map(|i| (i, DecoderCache::new(self.params.config())))
            .collect()
    }
}

impl<T: Scalar> StepScorer for NeuralScorer<'_, T> {
    type State = (usize, DecoderCache<T>);

    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn advance(&mut self, rows: Vec<(Self::State, u32)>) -> Result<Vec<(Self::State, Vec<f64>)>> {
        let mut rows = rows;
        let mut step: Vec<(&EncodedSource<T>, &mut DecoderCache<T>, u32)> = rows
            .iter_mut()
            .map(|((src, cache), token)| (&self.sources[*src], cache, *token))
            .collect();
        let logits = decoder_step(self.params, &mut step)?;
        let vocab = self.vocab_size();
        Ok(rows
            .into_iter()
            .zip(logits.chunks_exact(vocab))
            .map(|((state, _), row)| (state, log_softmax(row)))
            .collect())
    }
}

struct Beam<S> {
    state: S,
    tokens: Vec<u32>,
    log_prob: f64,
    /// Last token chosen, not yet fed to the scorer.
    pending: u32,
}

struct Search<S> {
    width: usize,
    live: Vec<Beam<S>>,
    done: Vec<Hypothesis>,
}

fn emittable(token: u32) -> bool {
    token != PAD && token != BOS
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.finished.cmp(&a.finished))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over any scorer, all items advanced together each step.
///
/// Candidates are ranked by score, then by parent beam rank and token id, so
/// the result is deterministic. EOS candidates ranked within the top
/// `beam_size` retire; up to `beam_size` non-EOS candidates stay live.
/// Results hold at most `beam_size` hypotheses per item, best first.
pub fn search<S: StepScorer>(
    scorer: &mut S,
    initial: Vec<S::State>,
    config: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    config.validate()?;
    let k = config.beam_size;
    search_widths(scorer, initial.into_iter().map(|s| (s, k)).collect(), config)
}

/// Width-monotone beam search: the ranked union of [`search`] at every width
/// from 1 to `beam_size`, run in one batched pass.
///
/// Pruned beam search alone can lose the best path when the beam widens, so
/// the union is what guarantees the top result never scores below greedy
/// decoding or a narrower beam.
pub fn search_nested<S: StepScorer>(
    scorer: &mut S,
    initial: Vec<S::State>,
    config: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    config.validate()?;
    let k = config.beam_size;
    let n = initial.len();
    let items = initial
        .into_iter()
        .flat_map(|s| (1..=k).map(move |w| (s.clone(), w)))
        .collect();
    let mut results = search_widths(scorer, items, config)?.into_iter();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut merged: Vec<Hypothesis> = results.by_ref().take(k).flatten().collect();
        merged.sort_by(by_score);
        let mut seen = std::collections::HashSet::new();
        merged.retain(|h| seen.insert((h.tokens.clone(), h.finished)));
        merged.truncate(k);
        out.push(merged);
    }
    Ok(out)
}

fn search_widths<S: StepScorer>(
    scorer: &mut S,
    initial: Vec<(S::State, usize)>,
    config: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    let vocab = scorer.vocab_size();
    let mut items: Vec<Search<S::State>> = initial
        .into_iter()
        .map(|(state, width)| Search {
            width,
            live: vec![Beam {
                state,
                tokens: Vec::new(),
                log_prob: 0.0,
                pending: BOS,
            }],
            done: Vec::new(),
        })
        .collect();

    for step in 0..config.max_len {
        let mut rows = Vec::new();
        let mut owners = Vec::new();
        for (i, item) in items.iter_mut().enumerate() {
            for beam in item.live.drain(..) {
                rows.push((beam.state, beam.pending));
                owners.push((i, beam.tokens, beam.log_prob));
            }
        }
        if rows.is_empty() {
            break;
        }
        let advanced = scorer.advance(rows)?;
        let mut per_item: Vec<Vec<(S::State, Vec<u32>, f64, Vec<f64>)>> =
            (0..items.len()).map(|_| Vec::new()).collect();
        for ((state, lp), (i, tokens, log_prob)) in advanced.into_iter().zip(owners) {
            if lp.len() != vocab {
                return Err(Error::Shape(format!(
                    "scorer returned {} log-probs for vocabulary {vocab}",
                    lp.len()
                )));
            }
            per_item[i].push((state, tokens, log_prob, lp));
        }
        let len = step + 1;
        for (item, parents) in items.iter_mut().zip(per_item) {
            if parents.is_empty() {
                continue;
            }
            let k = item.width;
            let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(parents.len() * vocab);
            for (p, (_, _, log_prob, lp)) in parents.iter().enumerate() {
                for (t, &l) in lp.iter().enumerate() {
                    let t = t as u32;
                    if emittable(t) && l > f64::NEG_INFINITY {
                        cands.push((log_prob + l, p, t));
                    }
                }
            }
            cands.sort_by(|a, b| {
                config
                    .score(b.0, len)
                    .total_cmp(&config.score(a.0, len))
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            for (rank, &(log_prob, p, t)) in cands.iter().enumerate() {
                if rank >= k && item.live.len() >= k {
                    break;
                }
                let parent = &parents[p];
                if t == EOS {
                    if rank < k {
                        let score = config.score(log_prob, len);
                        item.done
                            .push(Hypothesis::new(parent.1.clone(), log_prob, score, true));
                    }
                } else if item.live.len() < k {
                    let mut tokens = parent.1.clone();
                    tokens.push(t);
                    item.live.push(Beam {
                        state: parent.0.clone(),
                        tokens,
                        log_prob,
                        pending: t,
                    });
                }
            }
            // Log-probabilities only fall, so once the best live beam cannot beat
            // the k-th finished hypothesis, nothing better can appear.
            if config.length_penalty == 0.0 && item.done.len() >= k {
                item.done.sort_by(by_score);
                let bar = item.done[k - 1].score;
                if item.live.iter().all(|b| b.log_prob <= bar) {
                    item.live.clear();
                }
            }
        }
    }

    Ok(items
        .into_iter()
        .map(|mut item| {
            for beam in item.live {
                let score = config.score(beam.log_prob, beam.tokens.len());
                item.done
                    .push(Hypothesis::new(beam.tokens, beam.log_prob, score, false));
            }
            item.done.sort_by(by_score);
            item.done.truncate(item.width);
            item.done
        })
        .collect())
}

fn check_source<T: Scalar>(params: &ModelParameters<T>, src: &TokenSequence) -> Result<()> {
    let cfg = params.config();
    let n = src.unpadded_len();
    if n == 0 {
        return Err(Error::InvalidInput("empty source sequence".into()));
    }
    if n > cfg.max_src_len {
        return Err(Error::Shape(format!(
            "source length {n} exceeds maximum {}",
            cfg.max_src_len
        )));
    }
    if let Some(&bad) = src.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} out of range")));
    }
    Ok(())
}

/// Decodes every source; each slot carries its own result so one bad input
/// does not sink the rest.
pub fn batch_decode<T: Scalar>(
    params: &ModelParameters<T>,
    sources: &[TokenSequence],
    config: &DecodeConfig,
) -> Vec<Result<Vec<Hypothesis>>> {
    let mut out: Vec<Option<Result<Vec<Hypothesis>>>> = (0..sources.len()).map(|_| None).collect();
    if let Err(e) = config.validate() {
        return sources.iter().map(|_| Err(e.duplicate())).collect();
    }
    let mut effective = config.clone();
    effective.max_len = config.max_len.min(params.config().max_tgt_len);
    let mut valid = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        match check_source(params, src) {
            Ok(()) => valid.push(i),
            Err(e) => out[i] = Some(Err(e)),
        }
    }
    for chunk in valid.chunks(CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().map(|&i| &sources[i]).collect();
        let result = NeuralScorer::new(params, &refs).and_then(|mut scorer| {
            let initial = scorer.initial_states();
            search_nested(&mut scorer, initial, &effective)
        });
        match result {
            Ok(hyps) => {
                for (&i, h) in chunk.iter().zip(hyps) {
                    out[i] = Some(Ok(h));
                }
            }
            Err(e) => {
                for &i in chunk {
                    out[i] = Some(Err(e.duplicate()));
                }
            }
        }
    }
    out.into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

/// Beam search for a single source.
pub fn beam_search<T: Scalar>(
    params: &ModelParameters<T>,
    source: &TokenSequence,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    batch_decode(params, std::slice::from_ref(source), config)
        .pop()
        .expect("one result per source")
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<T: Scalar>(
    params: &ModelParameters<T>,
    source: &TokenSequence,
    max_len: usize,
) -> Result<Hypothesis> {
    check_source(params, source)?;
    let max_len = max_len.min(params.config().max_tgt_len);
    let encoded = encode_sources(params, &[source])?;
    let mut cache = DecoderCache::new(params.config());
    let mut token = BOS;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let logits = decoder_step(params, &mut [(&encoded[0], &mut cache, token)])?;
        let lp = log_softmax(&logits);
        let (best, l) = lp
            .iter()
            .enumerate()
            .filter(|&(t, l)| emittable(t as u32) && *l > f64::NEG_INFINITY)
            .fold((None, f64::NEG_INFINITY), |(bt, bl), (t, &l)| {
                if bt.is_none() || l > bl {
                    (Some(t as u32), l)
                } else {
                    (bt, bl)
                }
            });
        let best = best.ok_or_else(|| Error::NonFinite("decoder produced no finite log-probability".into()))?;
        log_prob += l;
        if best == EOS {
            return Ok(Hypothesis::new(tokens, log_prob, log_prob, true));
        }
        tokens.push(best);
        token = best;
    }
    Ok(Hypothesis::new(tokens, log_prob, log_prob, false))
}
