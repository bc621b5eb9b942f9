//! Synthetic languages with fully known spelling rules, for tests and demos.
//!
//! Every grapheme is one character mapped to a fixed phone string, so the
//! correct pronunciation of any generated word is known exactly.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::LanguageTag;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    tag: LanguageTag,
    consonants: Vec<(char, &'static str)>,
    vowels: Vec<(char, &'static str)>,
}

const LATIN_CONSONANTS: [(char, &str); 19] = [
    ('n', "n"),
    ('s', "s"),
    ('l', "l"),
    ('r', "ɾ"),
    ('b', "b"),
    ('d', "d"),
    ('f', "f"),
    ('g', "ɡ"),
    ('k', "k"),
    ('m', "m"),
    ('p', "p"),
    ('t', "t"),
    ('v', "v"),
    ('z', "z"),
    ('c', "t͡ʃ"),
    ('j', "x"),
    ('h', "h"),
    ('x', "ks"),
    ('ñ', "ɲ"),
];

/// Consonants at the front of each table may close a syllable.
const CODAS: usize = 4;

const LATIN_VOWELS: [(char, &str); 5] = [('a', "a"), ('e', "e"), ('i', "i"), ('o', "o"), ('u', "u")];

fn replace(
    table: &[(char, &'static str)],
    changes: &[(char, &'static str)],
) -> Vec<(char, &'static str)> {
    table
        .iter()
        .map(|&(g, p)| {
            changes
                .iter()
                .find(|(c, _)| *c == g)
                .map_or((g, p), |&(c, q)| (c, q))
        })
        .collect()
}

impl SyntheticLanguage {
    /// A transparent Latin-script orthography: one letter, one phone (or fixed cluster).
    pub fn transparent(tag: LanguageTag) -> Self {
        SyntheticLanguage {
            tag,
            consonants: LATIN_CONSONANTS.to_vec(),
            vowels: LATIN_VOWELS.to_vec(),
        }
    }

    /// Same letters as [`transparent`](Self::transparent) but every vowel and
    /// several consonants are read differently.
    pub fn conflicting(tag: LanguageTag) -> Self {
        SyntheticLanguage {
            tag,
            consonants: replace(
                &LATIN_CONSONANTS,
                &[('c', "k"), ('j', "ʒ"), ('v', "β"), ('z', "θ"), ('g', "ɣ"), ('r', "r")],
            ),
            vowels: replace(
                &LATIN_VOWELS,
                &[('a', "ɑ"), ('e', "ɛ"), ('i', "ɪ"), ('o', "ɔ"), ('u', "ʊ")],
            ),
        }
    }

    /// Close relative of [`transparent`](Self::transparent) differing in three consonants.
    pub fn variant(tag: LanguageTag) -> Self {
        SyntheticLanguage {
            tag,
            consonants: replace(&LATIN_CONSONANTS, &[('c', "t͡s"), ('j', "ʝ"), ('z', "ð")]),
            vowels: LATIN_VOWELS.to_vec(),
        }
    }

    /// Georgian-script letters mapped to phones absent from the Latin languages.
    pub fn unseen_script(tag: LanguageTag) -> Self {
        SyntheticLanguage {
            tag,
            consonants: vec![
                ('ნ', "ɳ"),
                ('ს', "ɕ"),
                ('ლ', "ɬ"),
                ('რ', "ɽ"),
                ('ბ', "ɓ"),
                ('გ', "ɠ"),
                ('დ', "ɗ"),
                ('ვ', "ʋ"),
                ('ზ', "ɮ"),
                ('თ', "ʈ"),
                ('კ', "qʼ"),
                ('მ', "ɱ"),
                ('პ', "ʄ"),
                ('ჟ', "ʐ"),
                ('ტ', "ʕ"),
                ('ფ', "ħ"),
                ('ქ', "ʛ"),
                ('ღ', "ɰ"),
                ('ყ', "ʡ"),
            ],
            vowels: vec![('ა', "ɶ"), ('ე', "ɤ"), ('ი', "ɨ"), ('ო', "ɵ"), ('უ', "ɯ")],
        }
    }

    /// The same spelling rules under another tag.
    pub fn retagged(&self, tag: LanguageTag) -> Self {
        SyntheticLanguage {
            tag,
            ..self.clone()
        }
    }

    pub fn tag(&self) -> &LanguageTag {
        &self.tag
    }

    /// Pronunciation of a word spelled in this language's letters.
    pub fn transcribe(&self, word: &str) -> Result<String> {
        word.chars()
            .map(|c| {
                self.consonants
                    .iter()
                    .chain(&self.vowels)
                    .find(|(g, _)| *g == c)
                    .map(|(_, p)| *p)
                    .ok_or_else(|| Error::InvalidInput(format!("{c:?} is not a letter of {}", self.tag)))
            })
            .collect()
    }

    /// Two or three syllables; only the first may lack an onset, and codas come
    /// from the first four consonants, so vowel hiatus and doubled letters stay rare.
    fn word<R: Rng>(&self, rng: &mut R) -> String {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for i in 0..syllables {
            if i > 0 || rng.gen_bool(0.8) {
                w.push(self.consonants[rng.gen_range(0..self.consonants.len())].0);
            }
            w.push(self.vowels[rng.gen_range(0..self.vowels.len())].0);
            if rng.gen_bool(0.2) {
                w.push(self.consonants[rng.gen_range(0..CODAS)].0);
            }
        }
        w
    }

    /// `count` distinct random words with their pronunciations.
    pub fn lexicon(&self, count: usize, seed: u64) -> Lexicon {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = BTreeSet::new();
        while words.len() < count {
            words.insert(self.word(&mut rng));
        }
        let pairs: Vec<(String, String)> = words
            .into_iter()
            .map(|w| {
                let p = self.transcribe(&w).expect("generated from own letters");
                (w, p)
            })
            .collect();
        Lexicon::from_pairs(self.tag.clone(), pairs).expect("generated entries are valid")
    }
}
