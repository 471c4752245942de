//! APE corpus data model and the corpus-level operations used by every
//! training stage: synthetic construction, multilingual merging, LangId
//! prefixing, curriculum phase partitioning and domain splits.

mod io;
pub mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ExternalTranslator;
use crate::error::{Error, Result};
use crate::metrics;
use crate::qe::{self, QeAnnotation};

pub use io::{
    load_corpus, load_corpus_dir, load_parallel, save_corpus, save_parallel, CorpusMeta,
    CORPUS_STEM, MANIFEST_FILE,
};
pub use text::{detokenize, tokenize};

/// Language identifier token, e.g. `hin_Deva`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangId(String);

impl LangId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || code.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid language code {code:?}")));
        }
        Ok(LangId(code))
    }

    pub fn code(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LangId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        LangId::new(value)
    }
}

impl From<LangId> for String {
    fn from(id: LangId) -> String {
        id.0
    }
}

impl FromStr for LangId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LangId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Synthetic,
    Authentic,
    AugmentedPair,
    AugmentedCandidate,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Synthetic => "synthetic",
            Origin::Authentic => "authentic",
            Origin::AugmentedPair => "augmented-pair",
            Origin::AugmentedCandidate => "augmented-candidate",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Origin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synthetic" => Origin::Synthetic,
            "authentic" => Origin::Authentic,
            "augmented-pair" => Origin::AugmentedPair,
            "augmented-candidate" => Origin::AugmentedCandidate,
            other => return Err(Error::Config(format!("unknown origin {other:?}"))),
        })
    }
}

/// Which data split a corpus belongs to. Training stages refuse dev/test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

pub const UNKNOWN_DOMAIN: &str = "unknown";

/// One APE training unit: source `x`, machine translation `z`, post-edit `y`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ApeTriplet {
    pub source: Vec<String>,
    pub translation: Vec<String>,
    pub post_edit: Vec<String>,
    pub source_lang: LangId,
    pub target_lang: LangId,
    pub domain: String,
    pub origin: Origin,
}

impl ApeTriplet {
    pub fn new(
        source: Vec<String>,
        translation: Vec<String>,
        post_edit: Vec<String>,
        source_lang: LangId,
        target_lang: LangId,
        domain: impl Into<String>,
        origin: Origin,
    ) -> Result<Self> {
        let triplet = ApeTriplet {
            source,
            translation,
            post_edit,
            source_lang,
            target_lang,
            domain: domain.into(),
            origin,
        };
        triplet.validate()?;
        Ok(triplet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.translation.is_empty() || self.post_edit.is_empty() {
            return Err(Error::Data("triplet with an empty sequence".into()));
        }
        Ok(())
    }

    pub fn pair_label(&self) -> String {
        format!("{}-{}", self.source_lang, self.target_lang)
    }
}

/// Generic parallel sentence used for NMT training and synthetic triplets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<String>,
    pub reference: Vec<String>,
    pub source_lang: LangId,
    pub target_lang: LangId,
}

impl ParallelPair {
    pub fn new(
        source: Vec<String>,
        reference: Vec<String>,
        source_lang: LangId,
        target_lang: LangId,
    ) -> Result<Self> {
        if source.is_empty() || reference.is_empty() {
            return Err(Error::Data("parallel pair with an empty side".into()));
        }
        Ok(ParallelPair {
            source,
            reference,
            source_lang,
            target_lang,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_lang: LangId,
    pub target_lang: LangId,
    pub domain: String,
    pub origin: Origin,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub split: Split,
    pub annotated: bool,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// An ordered collection of triplets with optional index-aligned QE annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub triplets: Vec<ApeTriplet>,
    annotations: Option<Vec<QeAnnotation>>,
    pub split: Split,
    /// Free-form provenance notes copied into the manifest.
    pub provenance: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(triplets: Vec<ApeTriplet>) -> Self {
        Corpus {
            triplets,
            ..Default::default()
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_annotations(mut self, annotations: Vec<QeAnnotation>) -> Result<Self> {
        self.set_annotations(Some(annotations))?;
        Ok(self)
    }

    pub fn set_annotations(&mut self, annotations: Option<Vec<QeAnnotation>>) -> Result<()> {
        if let Some(ann) = &annotations {
            if ann.len() != self.triplets.len() {
                return Err(Error::Data(format!(
                    "{} annotations for {} triplets",
                    ann.len(),
                    self.triplets.len()
                )));
            }
            for (i, (a, t)) in ann.iter().zip(&self.triplets).enumerate() {
                if a.word_tags.len() != t.translation.len() {
                    return Err(Error::Data(format!(
                        "triplet {i}: {} word tags for {} translation tokens",
                        a.word_tags.len(),
                        t.translation.len()
                    )));
                }
            }
        }
        self.annotations = annotations;
        Ok(())
    }

    pub fn annotations(&self) -> Option<&[QeAnnotation]> {
        self.annotations.as_deref()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let mut counts: BTreeMap<(LangId, LangId, String, Origin), usize> = BTreeMap::new();
        for t in &self.triplets {
            *counts
                .entry((
                    t.source_lang.clone(),
                    t.target_lang.clone(),
                    t.domain.clone(),
                    t.origin,
                ))
                .or_default() += 1;
        }
        Manifest {
            total: self.triplets.len(),
            split: self.split,
            annotated: self.annotations.is_some(),
            entries: counts
                .into_iter()
                .map(|((source_lang, target_lang, domain, origin), count)| ManifestEntry {
                    source_lang,
                    target_lang,
                    domain,
                    origin,
                    count,
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps the triplets (and annotations) at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus {
            triplets: indices.iter().map(|&i| self.triplets[i].clone()).collect(),
            annotations: self
                .annotations
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i].clone()).collect()),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub fn annotation_or_default(&self, i: usize) -> QeAnnotation {
        match &self.annotations {
            Some(a) => a[i].clone(),
            None => {
                let t = &self.triplets[i];
                QeAnnotation::without_da(qe::word_tags(&t.translation, &t.post_edit))
            }
        }
    }
}

/// Builds (source, MT(source), reference) triplets; the human reference acts
/// as the post-edit. Sentences the translator fails on are skipped.
pub fn build_synthetic_triplets(
    pairs: &[ParallelPair],
    translator: &dyn ExternalTranslator,
) -> Result<Corpus> {
    for p in pairs {
        if !translator.supports(&p.source_lang, &p.target_lang) {
            return Err(Error::Translator(format!(
                "translator does not support {} -> {}",
                p.source_lang, p.target_lang
            )));
        }
    }
    let translated: Vec<_> = pairs
        .par_iter()
        .map(|p| translator.translate(&p.source, &p.source_lang, &p.target_lang))
        .collect();
    let mut triplets = Vec::with_capacity(pairs.len());
    for (i, (pair, mt)) in pairs.iter().zip(translated).enumerate() {
        match mt {
            Ok(mt) if !mt.is_empty() => triplets.push(ApeTriplet {
                source: pair.source.clone(),
                translation: mt,
                post_edit: pair.reference.clone(),
                source_lang: pair.source_lang.clone(),
                target_lang: pair.target_lang.clone(),
                domain: UNKNOWN_DOMAIN.to_string(),
                origin: Origin::Synthetic,
            }),
            Ok(_) => log::warn!("sentence {i}: translator returned an empty translation, skipped"),
            Err(e) => log::warn!("sentence {i}: translation failed ({e}), skipped"),
        }
    }
    if triplets.is_empty() && !pairs.is_empty() {
        return Err(Error::EmptyCorpus(
            "every sentence failed to translate".into(),
        ));
    }
    let mut corpus = Corpus::new(triplets);
    corpus
        .provenance
        .insert("recipe".into(), "source, MT(source), reference".into());
    Ok(corpus)
}

/// Concatenates `corpora` and applies a seeded uniform permutation.
pub fn merge_multilingual(corpora: &[Corpus], seed: u64) -> Result<Corpus> {
    if corpora.is_empty() {
        return Err(Error::Argument("nothing to merge".into()));
    }
    let split = corpora[0].split;
    if corpora.iter().any(|c| c.split != split) {
        return Err(Error::Argument("cannot merge corpora of different splits".into()));
    }
    let any_annotated = corpora.iter().any(|c| c.annotations.is_some());
    let mut triplets = Vec::new();
    let mut annotations = Vec::new();
    let mut provenance = BTreeMap::new();
    for c in corpora {
        for i in 0..c.len() {
            if any_annotated {
                annotations.push(c.annotation_or_default(i));
            }
        }
        triplets.extend(c.triplets.iter().cloned());
        provenance.extend(c.provenance.clone());
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let merged = Corpus {
        triplets,
        annotations: any_annotated.then_some(annotations),
        split,
        provenance,
    };
    let mut out = merged.select(&order);
    out.provenance
        .insert("merge_seed".into(), seed.to_string());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LangIdMode {
    #[default]
    None,
    OnlyAuthentic,
    All,
}

impl FromStr for LangIdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LangIdMode::None),
            "only-authentic" => Ok(LangIdMode::OnlyAuthentic),
            "all" => Ok(LangIdMode::All),
            other => Err(Error::Config(format!("unknown langid mode {other:?}"))),
        }
    }
}

impl fmt::Display for LangIdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LangIdMode::None => "none",
            LangIdMode::OnlyAuthentic => "only-authentic",
            LangIdMode::All => "all",
        })
    }
}

impl LangIdMode {
    pub fn applies_to(self, origin: Origin) -> bool {
        match self {
            LangIdMode::None => false,
            LangIdMode::OnlyAuthentic => origin == Origin::Authentic,
            LangIdMode::All => true,
        }
    }
}

/// Prepends `[target_lang]` to the selected sources. Already-prefixed
/// sources are left alone, so the operation is idempotent.
pub fn prefix_langid(corpus: &Corpus, mode: LangIdMode, valid: &[LangId]) -> Result<Corpus> {
    let mut out = corpus.clone();
    if mode == LangIdMode::None {
        return Ok(out);
    }
    for t in &mut out.triplets {
        if !mode.applies_to(t.origin) {
            continue;
        }
        if !valid.contains(&t.target_lang) {
            return Err(Error::Config(format!(
                "language id {} is not declared",
                t.target_lang
            )));
        }
        prefix_tokens(&mut t.source, &t.target_lang);
    }
    out.provenance.insert("langid_mode".into(), mode.to_string());
    Ok(out)
}

pub(crate) fn prefix_tokens(tokens: &mut Vec<String>, lang: &LangId) {
    if tokens.first().map(String::as_str) != Some(lang.code()) {
        tokens.insert(0, lang.code().to_string());
    }
}

/// Corpus-level Do-Nothing TER (fraction) between translations and post-edits.
pub fn do_nothing_ter(corpus: &Corpus) -> Result<f64> {
    let hyps: Vec<&[String]> = corpus.triplets.iter().map(|t| t.translation.as_slice()).collect();
    let refs: Vec<&[String]> = corpus.triplets.iter().map(|t| t.post_edit.as_slice()).collect();
    metrics::ter_corpus(&hyps, &refs)
}

/// Splits a synthetic corpus into the hard phase (TER > threshold) and the
/// easy phase (TER <= threshold), preserving order within each.
pub fn partition_cts_phases(synthetic: &Corpus, threshold_ter: f64) -> Result<(Corpus, Corpus)> {
    if !(threshold_ter >= 0.0) {
        return Err(Error::Argument(format!("threshold {threshold_ter} must be >= 0")));
    }
    let scores: Vec<f64> = synthetic
        .triplets
        .par_iter()
        .map(|t| metrics::ter(&t.translation, &t.post_edit).map(|(s, _)| s))
        .collect::<Result<_>>()?;
    let (hard, easy): (Vec<usize>, Vec<usize>) =
        (0..synthetic.len()).partition(|&i| scores[i] > threshold_ter);
    let mut phase1 = synthetic.select(&hard);
    let mut phase2 = synthetic.select(&easy);
    phase1
        .provenance
        .insert("cts_phase".into(), format!("1 (TER > {threshold_ter:.6})"));
    phase2
        .provenance
        .insert("cts_phase".into(), format!("2 (TER <= {threshold_ter:.6})"));
    Ok((phase1, phase2))
}

/// Maps domain labels onto training groups, with an optional catch-all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGrouping {
    pub groups: BTreeMap<String, String>,
    #[serde(default)]
    pub default: Option<String>,
}

impl DomainGrouping {
    pub fn group_of(&self, domain: &str) -> Option<&str> {
        self.groups
            .get(domain)
            .map(String::as_str)
            .or(self.default.as_deref())
    }

    pub fn declared_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self.groups.values().cloned().collect();
        groups.extend(self.default.clone());
        groups.sort();
        groups.dedup();
        groups
    }
}

pub fn split_by_domain(corpus: &Corpus, grouping: &DomainGrouping) -> Result<BTreeMap<String, Corpus>> {
    let mut members: BTreeMap<String, Vec<usize>> = grouping
        .declared_groups()
        .into_iter()
        .map(|g| (g, Vec::new()))
        .collect();
    for (i, t) in corpus.triplets.iter().enumerate() {
        let group = grouping.group_of(&t.domain).ok_or_else(|| {
            Error::Config(format!("domain {:?} is not covered by the grouping", t.domain))
        })?;
        members.entry(group.to_string()).or_default().push(i);
    }
    Ok(members
        .into_iter()
        .map(|(g, idx)| {
            let mut c = corpus.select(&idx);
            c.provenance.insert("domain_group".into(), g.clone());
            (g, c)
        })
        .collect())
}
