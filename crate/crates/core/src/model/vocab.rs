//! Joint byte-pair vocabulary over all languages.
//!
//! Words are split into characters with an end-of-word marker on the last
//! symbol; merges are learned greedily by pair frequency. Special tokens and
//! LangId codes are atomic and never segmented.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const END_OF_WORD: &str = "</w>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SEP_ID: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    atomic: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    /// Tokens encoded as a single id regardless of the merges.
    atomic: Vec<String>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let ranks = r.merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Vocab {
            tokens: r.tokens,
            merges: r.merges,
            atomic: r.atomic,
            index,
            ranks,
        }
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            merges: v.merges,
            atomic: v.atomic,
        }
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl Vocab {
    /// Learns `merges` merges over `words` (with repetition). `atomic` lists
    /// extra whole-word tokens such as LangId codes.
    pub fn train<'a, I>(words: I, merges: usize, atomic: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut atomic_all: Vec<String> = [PAD, BOS, EOS, UNK, SEP].iter().map(|s| s.to_string()).collect();
        for a in atomic {
            if a.chars().any(char::is_whitespace) || a.is_empty() {
                return Err(Error::Config(format!("invalid atomic token {a:?}")));
            }
            if atomic_all.contains(a) {
                return Err(Error::Config(format!("duplicate special token {a}")));
            }
            atomic_all.push(a.clone());
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for w in words {
            if !atomic_all.iter().any(|a| a == w) {
                *freq.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut segmented: Vec<(Vec<String>, usize)> =
            freq.iter().map(|(w, &c)| (initial_symbols(w), c)).collect();
        let mut symbols: Vec<String> = segmented.iter().flat_map(|(s, _)| s.clone()).collect();
        symbols.sort();
        symbols.dedup();

        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (s, c) in &segmented {
                for w in s.windows(2) {
                    *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            // Highest count; ties go to the lexicographically smallest pair.
            let Some(((a, b), _)) = counts.into_iter().fold(None, |best: Option<((&str, &str), usize)>, (p, c)| {
                match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                }
            }) else {
                break;
            };
            let pair = (a.to_string(), b.to_string());
            for (s, _) in segmented.iter_mut() {
                *s = merge_pair(s, &pair);
            }
            learned.push(pair);
        }
        let mut tokens = atomic_all.clone();
        tokens.extend(symbols);
        for (a, b) in &learned {
            tokens.push(format!("{a}{b}"));
        }
        let mut seen = std::collections::HashSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Ok(Vocab::from(VocabRepr {
            tokens,
            merges: learned,
            atomic: atomic_all,
        }))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn atomic(&self) -> &[String] {
        &self.atomic
    }

    pub fn is_special(&self, id: usize) -> bool {
        id <= SEP_ID
    }

    /// Subword ids of one word.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        if self.atomic.iter().any(|a| a == word) {
            return vec![self.index[word]];
        }
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            symbols = merge_pair(&symbols, &self.merges[rank]);
        }
        symbols
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK_ID))
            .collect()
    }

    /// Subword ids of a word sequence plus the index of each word's first subword.
    pub fn encode_words(&self, words: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut starts = Vec::with_capacity(words.len());
        for w in words {
            starts.push(ids.len());
            ids.extend(self.encode_word(w));
        }
        (ids, starts)
    }

    /// Joins subwords back into words, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            let tok = self.token(id);
            if self.atomic.iter().any(|a| a == tok) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(tok.to_string());
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(tok);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words
    }
}
