//! Word-level OK/BAD tags from TER alignments and sentence-level DA scores.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{ter, LinkKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "BAD")]
    Bad,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Ok => "OK",
            Tag::Bad => "BAD",
        }
    }

    /// Class index used by the word head: OK = 0, BAD = 1.
    pub fn class(self) -> usize {
        match self {
            Tag::Ok => 0,
            Tag::Bad => 1,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OK" => Ok(Tag::Ok),
            "BAD" => Ok(Tag::Bad),
            other => Err(Error::Data(format!("unknown word tag {other:?}"))),
        }
    }
}

/// QE targets for one triplet. `da_score` is `Some` exactly when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeAnnotation {
    pub da_score: Option<f64>,
    pub da_available: bool,
    pub word_tags: Vec<Tag>,
}

impl QeAnnotation {
    pub fn with_da(score: f64, word_tags: Vec<Tag>) -> Self {
        QeAnnotation {
            da_score: Some(score),
            da_available: true,
            word_tags,
        }
    }

    pub fn without_da(word_tags: Vec<Tag>) -> Self {
        QeAnnotation {
            da_score: None,
            da_available: false,
            word_tags,
        }
    }
}

/// One tag per MT token: OK on match links, BAD on substitutions and
/// insertions. Reference-side deletions produce no tag.
pub fn word_tags(mt: &[String], pe: &[String]) -> Vec<Tag> {
    if pe.is_empty() {
        return vec![Tag::Bad; mt.len()];
    }
    let (_, trace) = ter(mt, pe).expect("non-empty reference");
    let mut tags = vec![Tag::Bad; mt.len()];
    for link in &trace.alignment {
        if let (Some(h), LinkKind::Match) = (link.hyp, link.kind) {
            tags[h] = Tag::Ok;
        }
    }
    tags
}

/// Declared DA range, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DaRange {
    fn default() -> Self {
        DaRange { min: 0.0, max: 100.0 }
    }
}

/// Annotates every triplet with word tags and attaches the DA scores found in
/// `table` (keyed by line index). Missing ids are masked.
pub fn attach_da(corpus: &Corpus, table: &BTreeMap<usize, f64>, range: DaRange) -> Result<Corpus> {
    for (&id, &score) in table {
        if id >= corpus.len() {
            return Err(Error::Record {
                path: PathBuf::from("<da table>"),
                line: id + 1,
                message: format!("instance {id} does not exist ({} triplets)", corpus.len()),
            });
        }
        if !score.is_finite() || score < range.min || score > range.max {
            return Err(Error::Record {
                path: PathBuf::from("<da table>"),
                line: id + 1,
                message: format!("DA score {score} outside [{}, {}]", range.min, range.max),
            });
        }
    }
    let tags: Vec<Vec<Tag>> = corpus
        .triplets
        .par_iter()
        .map(|t| word_tags(&t.translation, &t.post_edit))
        .collect();
    let annotations = tags
        .into_iter()
        .enumerate()
        .map(|(i, tags)| match table.get(&i) {
            Some(&s) => QeAnnotation::with_da(s, tags),
            None => QeAnnotation::without_da(tags),
        })
        .collect();
    let mut out = corpus.clone();
    out.set_annotations(Some(annotations))?;
    out.provenance
        .insert("da_range".into(), format!("[{}, {}]", range.min, range.max));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DaNorm {
    #[default]
    Identity,
    Zscore,
    Minmax,
}

impl FromStr for DaNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(DaNorm::Identity),
            "zscore" => Ok(DaNorm::Zscore),
            "minmax" => Ok(DaNorm::Minmax),
            other => Err(Error::Config(format!("unknown DA normalization {other:?}"))),
        }
    }
}

impl fmt::Display for DaNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DaNorm::Identity => "identity",
            DaNorm::Zscore => "zscore",
            DaNorm::Minmax => "minmax",
        })
    }
}

/// Transforms the available scores; returns the scheme actually applied
/// (identity when the input is degenerate).
pub fn normalize_da(scores: &[Option<f64>], scheme: DaNorm) -> (Vec<Option<f64>>, DaNorm) {
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    let n = present.len() as f64;
    let transform: Box<dyn Fn(f64) -> f64> = match scheme {
        DaNorm::Identity => return (scores.to_vec(), DaNorm::Identity),
        _ if present.len() < 2 => {
            log::warn!("{scheme} needs at least two DA scores, left unnormalized");
            return (scores.to_vec(), DaNorm::Identity);
        }
        DaNorm::Zscore => {
            let mean = present.iter().sum::<f64>() / n;
            // Population variance.
            let var = present.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            if var <= 0.0 {
                log::warn!("DA scores have zero variance, left unnormalized");
                return (scores.to_vec(), DaNorm::Identity);
            }
            let sd = var.sqrt();
            Box::new(move |x| (x - mean) / sd)
        }
        DaNorm::Minmax => {
            let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                log::warn!("DA scores have zero range, left unnormalized");
                return (scores.to_vec(), DaNorm::Identity);
            }
            Box::new(move |x| (x - lo) / (hi - lo))
        }
    };
    (scores.iter().map(|s| s.map(&transform)).collect(), scheme)
}

/// Applies [`normalize_da`] to an annotated corpus and records the scheme.
pub fn normalize_corpus_da(corpus: &Corpus, scheme: DaNorm) -> Result<Corpus> {
    let ann = corpus
        .annotations()
        .ok_or_else(|| Error::Data("corpus has no QE annotations".into()))?;
    let scores: Vec<Option<f64>> = ann.iter().map(|a| a.da_score).collect();
    let (normed, applied) = normalize_da(&scores, scheme);
    let updated = ann
        .iter()
        .zip(normed)
        .map(|(a, s)| QeAnnotation {
            da_score: s,
            ..a.clone()
        })
        .collect();
    let mut out = corpus.clone();
    out.set_annotations(Some(updated))?;
    out.provenance.insert("da_normalization".into(), applied.to_string());
    Ok(out)
}
