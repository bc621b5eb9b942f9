//! Phone segmentation, phone/word error rates, evaluation reports and rank correlation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_segmentation::UnicodeSegmentation;

use crate::codec::{encode, LanguageTag};
use crate::decode::{batch_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::nn::ModelParameters;
use crate::scalar::Scalar;

const TIE_BARS: [char; 2] = ['\u{0361}', '\u{035C}'];

/// Averaging rule stated in every report.
pub const AVERAGING_RULE: &str =
    "PER micro-averaged within a language (edit operations / reference phones); \
     headline PER and WER are unweighted means over languages";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PhoneSequence(Vec<String>);

impl PhoneSequence {
    pub fn new(phones: Vec<String>) -> Self {
        PhoneSequence(phones)
    }

    pub fn phones(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn join(&self) -> String {
        self.0.concat()
    }
}

fn attaches_to_previous(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ModifierLetter
            | GeneralCategory::NonspacingMark
            | GeneralCategory::SpacingMark
            | GeneralCategory::EnclosingMark
    )
}

/// Splits an IPA string into phones.
///
/// Space-separated input is split on whitespace. Otherwise the string is cut
/// into extended grapheme clusters; modifier letters and combining marks join
/// the preceding phone, and a tie bar joins the clusters on either side.
pub fn segment_phones(ipa: &str) -> PhoneSequence {
    if ipa.contains(' ') {
        return PhoneSequence(ipa.split_whitespace().map(str::to_owned).collect());
    }
    let mut phones: Vec<String> = Vec::new();
    for cluster in ipa.graphemes(true) {
        let first = cluster.chars().next().expect("clusters are non-empty");
        match phones.last_mut() {
            Some(prev) if attaches_to_previous(first) || prev.ends_with(TIE_BARS) => {
                prev.push_str(cluster)
            }
            _ => phones.push(cluster.to_owned()),
        }
    }
    PhoneSequence(phones)
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit operations and reference length against the reference with the lowest PER
/// (first one on ties).
pub fn best_reference(hyp: &PhoneSequence, refs: &[PhoneSequence]) -> Result<(usize, usize)> {
    if refs.is_empty() {
        return Err(Error::InvalidReference("no reference pronunciations".into()));
    }
    if refs.iter().any(PhoneSequence::is_empty) {
        return Err(Error::InvalidReference("empty reference pronunciation".into()));
    }
    let mut best: Option<(usize, usize)> = None;
    for r in refs {
        let edits = levenshtein(hyp.phones(), r.phones());
        let better = match best {
            None => true,
            // edits/len < best_edits/best_len, compared without division
            Some((be, bl)) => edits * bl < be * r.len(),
        };
        if better {
            best = Some((edits, r.len()));
        }
    }
    Ok(best.expect("refs is non-empty"))
}

/// Percent edit distance to the closest reference; unbounded above.
pub fn phone_error_rate(hyp: &PhoneSequence, refs: &[PhoneSequence]) -> Result<f64> {
    let (edits, len) = best_reference(hyp, refs)?;
    Ok(100.0 * edits as f64 / len as f64)
}

fn matches_any(pred: &PhoneSequence, refs: &[PhoneSequence]) -> bool {
    refs.iter().any(|r| r == pred)
}

/// Percent of predictions whose phone sequence equals none of its references.
pub fn word_error_rate(preds: &[String], refs: &[Vec<String>]) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} reference sets",
            preds.len(),
            refs.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let mut wrong = 0;
    for (pred, rs) in preds.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::InvalidReference("empty reference set".into()));
        }
        let segmented: Vec<PhoneSequence> = rs.iter().map(|r| segment_phones(r)).collect();
        if !matches_any(&segment_phones(pred), &segmented) {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub language: LanguageTag,
    pub words: usize,
    pub per: f64,
    pub wer: f64,
    pub edit_operations: usize,
    pub reference_phones: usize,
    pub wrong_words: usize,
    /// Unweighted mean of per-word PER, for comparison with the micro average.
    pub per_macro_words: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Spearman's rho between training dictionary size and PER.
    pub spearman_rho: f64,
    pub languages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: String,
    pub rows: Vec<LanguageRow>,
    /// Unweighted mean of row PER.
    pub per: f64,
    /// Unweighted mean of row WER.
    pub wer: f64,
    /// Total edit operations over total reference phones, pooled across languages.
    pub pooled_per: f64,
    pub pooled_wer: f64,
    pub correlation: Option<Correlation>,
}

/// One word's outcome: `None` marks a failed prediction.
pub type Prediction = Option<String>;

/// Scores predictions for every entry of `lexicon`, in entry order.
pub fn score_language(lexicon: &Lexicon, predictions: &[Prediction]) -> Result<LanguageRow> {
    if predictions.len() != lexicon.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} words",
            predictions.len(),
            lexicon.len()
        )));
    }
    if lexicon.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no test words for {}",
            lexicon.language()
        )));
    }
    let mut edits = 0;
    let mut phones = 0;
    let mut wrong = 0;
    let mut per_sum = 0.0;
    for (entry, pred) in lexicon.entries().iter().zip(predictions) {
        let refs: Vec<PhoneSequence> = entry
            .pronunciations
            .iter()
            .map(|p| segment_phones(p))
            .collect();
        let (e, len, correct) = match pred {
            Some(p) => {
                let hyp = segment_phones(p);
                let (e, len) = best_reference(&hyp, &refs)?;
                (e, len, matches_any(&hyp, &refs))
            }
            None => {
                let len = refs.first().map(PhoneSequence::len).unwrap_or(0);
                if len == 0 {
                    return Err(Error::InvalidReference(entry.word.clone()));
                }
                (len, len, false)
            }
        };
        edits += e;
        phones += len;
        per_sum += 100.0 * e as f64 / len as f64;
        if !correct {
            wrong += 1;
        }
    }
    let n = lexicon.len();
    Ok(LanguageRow {
        language: lexicon.language().clone(),
        words: n,
        per: 100.0 * edits as f64 / phones as f64,
        wer: 100.0 * wrong as f64 / n as f64,
        edit_operations: edits,
        reference_phones: phones,
        wrong_words: wrong,
        per_macro_words: per_sum / n as f64,
    })
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<LanguageRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("no languages evaluated".into()));
        }
        rows.sort_by(|a, b| a.language.cmp(&b.language));
        let n = rows.len() as f64;
        let edits: usize = rows.iter().map(|r| r.edit_operations).sum();
        let phones: usize = rows.iter().map(|r| r.reference_phones).sum();
        let words: usize = rows.iter().map(|r| r.words).sum();
        let wrong: usize = rows.iter().map(|r| r.wrong_words).sum();
        Ok(EvalReport {
            averaging: AVERAGING_RULE.to_owned(),
            per: rows.iter().map(|r| r.per).sum::<f64>() / n,
            wer: rows.iter().map(|r| r.wer).sum::<f64>() / n,
            pooled_per: 100.0 * edits as f64 / phones as f64,
            pooled_wer: 100.0 * wrong as f64 / words as f64,
            rows,
            correlation: None,
        })
    }

    pub fn row(&self, language: &LanguageTag) -> Option<&LanguageRow> {
        self.rows.iter().find(|r| &r.language == language)
    }

    /// Attaches Spearman's rho between each language's training size and its PER.
    pub fn correlate(&mut self, training_sizes: &[(LanguageTag, usize)]) -> Result<()> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in &self.rows {
            if let Some((_, size)) = training_sizes.iter().find(|(t, _)| t == &row.language) {
                xs.push(*size as f64);
                ys.push(row.per);
            }
        }
        let rho = spearman_rho(&xs, &ys)?;
        self.correlation = Some(Correlation {
            spearman_rho: rho,
            languages: xs.len(),
        });
        Ok(())
    }

    /// Aligned text table with `PER/WER` cells in percent, one decimal.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.language.as_str().len())
            .max()
            .unwrap_or(0)
            .max("language".len())
            .max("mean".len());
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.averaging);
        let _ = writeln!(out, "{:<width$}  {:>7}  PER/WER(%)", "language", "words");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:.1}/{:.1}",
                r.language.as_str(),
                r.words,
                r.per,
                r.wer
            );
        }
        let total: usize = self.rows.iter().map(|r| r.words).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:.1}/{:.1}",
            "mean", total, self.per, self.wer
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:.1}/{:.1}",
            "pooled", total, self.pooled_per, self.pooled_wer
        );
        if let Some(c) = &self.correlation {
            let _ = writeln!(
                out,
                "spearman rho (training size vs PER, {} languages): {:.3}",
                c.languages, c.spearman_rho
            );
        }
        out
    }
}

/// Decodes every test word with its own language tag (or `tag_override`) and scores it.
pub fn evaluate_with_tag<T: Scalar>(
    params: &ModelParameters<T>,
    test_lexicons: &[Lexicon],
    config: &DecodeConfig,
    tag_override: Option<&LanguageTag>,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(test_lexicons.len());
    for lexicon in test_lexicons {
        if lexicon.is_empty() {
            return Err(Error::InvalidInput(format!(
                "test lexicon for {} is empty",
                lexicon.language()
            )));
        }
        let tag = tag_override.unwrap_or(lexicon.language());
        let sources: Vec<Result<_>> = lexicon
            .entries()
            .iter()
            .map(|e| encode(&e.word, Some(tag)))
            .collect();
        let predictions = decode_all(params, &sources, config);
        rows.push(score_language(lexicon, &predictions)?);
    }
    EvalReport::from_rows(rows)
}

/// Beam-decodes each test word with its language tag and reports PER/WER.
pub fn evaluate<T: Scalar>(
    params: &ModelParameters<T>,
    test_lexicons: &[Lexicon],
    config: &DecodeConfig,
) -> Result<EvalReport> {
    evaluate_with_tag(params, test_lexicons, config, None)
}

fn decode_all<T: Scalar>(
    params: &ModelParameters<T>,
    sources: &[Result<crate::codec::TokenSequence>],
    config: &DecodeConfig,
) -> Vec<Prediction> {
    let valid: Vec<(usize, crate::codec::TokenSequence)> = sources
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().ok().map(|s| (i, s.clone())))
        .collect();
    let seqs: Vec<_> = valid.iter().map(|(_, s)| s.clone()).collect();
    let mut out: Vec<Prediction> = vec![None; sources.len()];
    if seqs.is_empty() {
        return out;
    }
    let results = batch_decode(params, &seqs, config);
    for ((i, _), result) in valid.iter().zip(results) {
        if let Ok(hyps) = result {
            out[*i] = hyps.into_iter().next().map(|h| h.text);
        }
    }
    out
}

fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j share the mean of ranks i+1..=j+1.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "at least two points are required".into(),
        ));
    }
    let rx = fractional_ranks(x);
    let ry = fractional_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation("a variable has no rank variance".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}
