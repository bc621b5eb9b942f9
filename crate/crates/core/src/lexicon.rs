//! Pronunciation dictionaries: TSV parsing, merging, word-list filtering and splits.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::codec::LanguageTag;
use crate::error::{Error, Result};

/// Fraction of malformed lines above which a whole dictionary is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub language: LanguageTag,
    pub word: String,
    /// Distinct, non-empty, in priority order.
    pub pronunciations: Vec<String>,
}

/// All entries of one language, unique by word and kept sorted by word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    language: LanguageTag,
    entries: Vec<LexiconEntry>,
}

impl Lexicon {
    /// Builds a lexicon from `(word, pronunciations)` groups, merging repeated words.
    pub fn from_pairs<I, W, P>(language: LanguageTag, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (W, P)>,
        W: Into<String>,
        P: Into<String>,
    {
        let mut grouped: IndexMap<String, Vec<String>> = IndexMap::new();
        for (word, pron) in pairs {
            let word = word.into();
            let pron = pron.into();
            validate_field(&word, "word")?;
            validate_field(&pron, "pronunciation")?;
            let prons = grouped.entry(word).or_default();
            if !prons.contains(&pron) {
                prons.push(pron);
            }
        }
        Ok(Self::from_grouped(language, grouped))
    }

    fn from_grouped(language: LanguageTag, grouped: IndexMap<String, Vec<String>>) -> Self {
        let mut entries: Vec<LexiconEntry> = grouped
            .into_iter()
            .map(|(word, pronunciations)| LexiconEntry {
                language: language.clone(),
                word,
                pronunciations,
            })
            .collect();
        entries.sort_by(|a, b| a.word.cmp(&b.word));
        Lexicon { language, entries }
    }

    pub fn empty(language: LanguageTag) -> Self {
        Lexicon {
            language,
            entries: Vec::new(),
        }
    }

    pub fn language(&self) -> &LanguageTag {
        &self.language
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&LexiconEntry> {
        self.entries
            .binary_search_by(|e| e.word.as_str().cmp(word))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    /// Total number of (word, pronunciation) pairs.
    pub fn pair_count(&self) -> usize {
        self.entries.iter().map(|e| e.pronunciations.len()).sum()
    }

    /// Writes one `word<TAB>pronunciation` line per pronunciation.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in &self.entries {
            for pron in &entry.pronunciations {
                writeln!(out, "{}\t{}", entry.word, pron)?;
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("lexicon text is UTF-8")
    }

    fn subset(&self, words: &HashSet<&str>) -> Lexicon {
        Lexicon {
            language: self.language.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| words.contains(e.word.as_str()))
                .cloned()
                .collect(),
        }
    }
}

fn validate_field(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        Err(Error::InvalidInput(format!("invalid {what} {s:?}")))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDictionary {
    pub lexicon: Lexicon,
    /// 1-based numbers of skipped lines.
    pub malformed_lines: Vec<usize>,
    /// Non-blank lines seen.
    pub total_lines: usize,
}

/// Parses `word<TAB>pronunciation` lines. Blank lines are ignored; lines without
/// exactly one tab are skipped and reported, and more than 10% of them fails the parse.
pub fn parse_dictionary<R: BufRead>(stream: R, language: &LanguageTag) -> Result<ParsedDictionary> {
    let mut grouped: IndexMap<String, Vec<String>> = IndexMap::new();
    let mut malformed_lines = Vec::new();
    let mut total_lines = 0;
    for (idx, line) in stream.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        total_lines += 1;
        let mut fields = line.split('\t');
        let (word, pron) = match (fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(p), None) => (w.trim(), p.trim()),
            _ => {
                malformed_lines.push(idx + 1);
                continue;
            }
        };
        if word.is_empty() || pron.is_empty() {
            malformed_lines.push(idx + 1);
            continue;
        }
        let prons = grouped.entry(word.to_owned()).or_default();
        if !prons.iter().any(|p| p == pron) {
            prons.push(pron.to_owned());
        }
    }
    if malformed_lines.len() as f64 > MAX_MALFORMED_FRACTION * total_lines as f64 {
        return Err(Error::Format(format!(
            "{} of {} lines malformed (first at line {})",
            malformed_lines.len(),
            total_lines,
            malformed_lines[0]
        )));
    }
    Ok(ParsedDictionary {
        lexicon: Lexicon::from_grouped(language.clone(), grouped),
        malformed_lines,
        total_lines,
    })
}

pub fn read_dictionary(path: &Path, language: &LanguageTag) -> Result<ParsedDictionary> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dictionary(std::io::BufReader::new(file), language).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Union of same-language lexicons. Sources named in `priority` come first (in that
/// order), then the rest in the order given; pronunciations follow that source order.
pub fn merge(sources: &[(&str, &Lexicon)], priority: &[&str]) -> Result<Lexicon> {
    let Some((_, first)) = sources.first() else {
        return Err(Error::InvalidInput("nothing to merge".into()));
    };
    let language = first.language().clone();
    if let Some((name, other)) = sources.iter().find(|(_, l)| l.language() != &language) {
        return Err(Error::InvalidInput(format!(
            "source {name:?} has language {} but {language} was expected",
            other.language()
        )));
    }

    let mut ordered: Vec<&Lexicon> = Vec::with_capacity(sources.len());
    let mut used = vec![false; sources.len()];
    for p in priority {
        for (i, (name, lex)) in sources.iter().enumerate() {
            if !used[i] && name == p {
                used[i] = true;
                ordered.push(lex);
            }
        }
    }
    for (i, (_, lex)) in sources.iter().enumerate() {
        if !used[i] {
            ordered.push(lex);
        }
    }

    let mut grouped: IndexMap<String, Vec<String>> = IndexMap::new();
    for lex in ordered {
        for entry in lex.entries() {
            let prons = grouped.entry(entry.word.clone()).or_default();
            for p in &entry.pronunciations {
                if !prons.contains(p) {
                    prons.push(p.clone());
                }
            }
        }
    }
    Ok(Lexicon::from_grouped(language, grouped))
}

fn is_word_char(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        UppercaseLetter
            | LowercaseLetter
            | TitlecaseLetter
            | ModifierLetter
            | OtherLetter
            | NonspacingMark
            | SpacingMark
            | EnclosingMark
    )
}

/// Keeps words with `frequency >= threshold` made only of letters, marks and modifier letters.
pub fn filter_wordlist(words: &[(String, u64)], threshold: u64) -> Vec<String> {
    words
        .iter()
        .filter(|(w, freq)| *freq >= threshold && !w.is_empty() && w.chars().all(is_word_char))
        .map(|(w, _)| w.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub const STANDARD_DEV: usize = 50;
    pub const STANDARD_TEST: usize = 500;
    pub const LOW_RESOURCE_TEST: usize = 200;

    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            dev_size: Self::STANDARD_DEV,
            test_size: Self::STANDARD_TEST,
            seed,
        }
    }

    pub fn low_resource(seed: u64) -> Self {
        SplitSpec {
            dev_size: Self::STANDARD_DEV,
            test_size: Self::LOW_RESOURCE_TEST,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Lexicon,
    pub dev: Lexicon,
    pub test: Lexicon,
}

/// Seeded word-level split: `dev_size` and `test_size` words are set aside, the rest trains.
pub fn partition(lexicon: &Lexicon, spec: SplitSpec) -> Result<Split> {
    let needed = spec.dev_size + spec.test_size + 1;
    if lexicon.len() < needed {
        return Err(Error::InsufficientData(format!(
            "{} has {} words but {} are needed ({} short)",
            lexicon.language(),
            lexicon.len(),
            needed,
            needed - lexicon.len()
        )));
    }
    let mut words: Vec<&str> = lexicon.words().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    words.shuffle(&mut rng);
    let (dev, rest) = words.split_at(spec.dev_size);
    let (test, train) = rest.split_at(spec.test_size);
    Ok(Split {
        train: lexicon.subset(&train.iter().copied().collect()),
        dev: lexicon.subset(&dev.iter().copied().collect()),
        test: lexicon.subset(&test.iter().copied().collect()),
    })
}

/// Tags of lexicons with strictly more than `min_entries` words, sorted.
pub fn eligible_languages(lexicons: &[Lexicon], min_entries: usize) -> Vec<LanguageTag> {
    let mut tags: Vec<LanguageTag> = lexicons
        .iter()
        .filter(|l| l.len() > min_entries)
        .map(|l| l.language().clone())
        .collect();
    tags.sort();
    tags
}
