//! Cross-target augmentation: quadruples, Additional-Pairs triplets and
//! External-Candidates triplets.

mod translator;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ApeTriplet, Corpus, LangId, Origin};
use crate::error::{Error, Result};

pub use translator::{CipherTranslator, CommandTranslator, ExternalTranslator};

pub const DEFAULT_SEP: &str = "<sep>";

/// A triplet extended with a translation of its source into the other
/// (cross-target) language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApeQuadruple {
    pub source: Vec<String>,
    pub external_translation: Vec<String>,
    pub translation: Vec<String>,
    pub post_edit: Vec<String>,
    pub source_lang: LangId,
    pub external_lang: LangId,
    pub target_lang: LangId,
    pub domain: String,
}

impl ApeQuadruple {
    pub fn validate(&self) -> Result<()> {
        if self.external_lang == self.target_lang {
            return Err(Error::Data(format!(
                "external language equals target language {}",
                self.target_lang
            )));
        }
        if [&self.source, &self.external_translation, &self.translation, &self.post_edit]
            .iter()
            .any(|s| s.is_empty())
        {
            return Err(Error::Data("quadruple with an empty sequence".into()));
        }
        Ok(())
    }
}

/// Source tokens without a leading target LangId token.
fn bare_source(t: &ApeTriplet) -> &[String] {
    match t.source.first() {
        Some(first) if first == t.target_lang.code() => &t.source[1..],
        _ => &t.source,
    }
}

/// Samples `n` triplets without replacement and translates their sources
/// into the cross-target language given by `external_for[target_lang]`.
/// Failed translations are replaced from the unsampled pool while it lasts.
pub fn make_quadruples(
    corpus: &Corpus,
    translator: &dyn ExternalTranslator,
    n: usize,
    external_for: &BTreeMap<LangId, LangId>,
    seed: u64,
) -> Result<Vec<ApeQuadruple>> {
    if n > corpus.len() {
        return Err(Error::Argument(format!(
            "asked for {n} quadruples from {} triplets",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = Vec::with_capacity(n);
    let mut next = 0;
    while out.len() < n && next < order.len() {
        let take = (n - out.len()).min(order.len() - next);
        let batch = &order[next..next + take];
        next += take;

        // Group by direction so batch translators see one direction per call.
        let mut by_dir: BTreeMap<(LangId, LangId), Vec<usize>> = BTreeMap::new();
        for &i in batch {
            let t = &corpus.triplets[i];
            let ext = external_for.get(&t.target_lang).ok_or_else(|| {
                Error::Config(format!("no external language declared for {}", t.target_lang))
            })?;
            if !translator.supports(&t.source_lang, ext) {
                return Err(Error::Translator(format!(
                    "translator does not support {} -> {ext}",
                    t.source_lang
                )));
            }
            by_dir.entry((t.source_lang.clone(), ext.clone())).or_default().push(i);
        }
        let mut results: BTreeMap<usize, Result<Vec<String>>> = BTreeMap::new();
        for ((from, to), idx) in &by_dir {
            let sources: Vec<Vec<String>> = idx
                .iter()
                .map(|&i| bare_source(&corpus.triplets[i]).to_vec())
                .collect();
            for (&i, r) in idx.iter().zip(translator.translate_batch(&sources, from, to)) {
                results.insert(i, r);
            }
        }
        for &i in batch {
            let t = &corpus.triplets[i];
            match results.remove(&i).expect("translated") {
                Ok(ext) if !ext.is_empty() => out.push(ApeQuadruple {
                    source: bare_source(t).to_vec(),
                    external_translation: ext,
                    translation: t.translation.clone(),
                    post_edit: t.post_edit.clone(),
                    source_lang: t.source_lang.clone(),
                    external_lang: external_for[&t.target_lang].clone(),
                    target_lang: t.target_lang.clone(),
                    domain: t.domain.clone(),
                }),
                Ok(_) => log::warn!("triplet {i}: empty external translation, backfilling"),
                Err(e) => log::warn!("triplet {i}: external translation failed ({e}), backfilling"),
            }
        }
    }
    if out.len() < n {
        log::warn!("only {} of {n} quadruples could be built", out.len());
    }
    Ok(out)
}

/// One triplet per quadruple: (external translation, translation,
/// post-edit), with the external language as the source language.
pub fn additional_pair_triplets(quads: &[ApeQuadruple]) -> Result<Corpus> {
    let triplets = quads
        .iter()
        .map(|q| {
            q.validate()?;
            ApeTriplet::new(
                q.external_translation.clone(),
                q.translation.clone(),
                q.post_edit.clone(),
                q.external_lang.clone(),
                q.target_lang.clone(),
                q.domain.clone(),
                Origin::AugmentedPair,
            )
        })
        .collect::<Result<_>>()?;
    let mut c = Corpus::new(triplets);
    c.provenance.insert("augmentation".into(), "additional-pairs".into());
    Ok(c)
}

/// One triplet per quadruple: (source, translation ++ [sep] ++ external
/// translation, post-edit).
pub fn external_candidate_triplets(quads: &[ApeQuadruple], sep: &str) -> Result<Corpus> {
    let triplets = quads
        .iter()
        .enumerate()
        .map(|(i, q)| {
            q.validate()?;
            if [&q.source, &q.external_translation, &q.translation, &q.post_edit]
                .iter()
                .any(|s| s.iter().any(|w| w == sep))
            {
                return Err(Error::Data(format!(
                    "quadruple {i} already contains the reserved token {sep}"
                )));
            }
            let mut translation = q.translation.clone();
            translation.push(sep.to_string());
            translation.extend(q.external_translation.iter().cloned());
            ApeTriplet::new(
                q.source.clone(),
                translation,
                q.post_edit.clone(),
                q.source_lang.clone(),
                q.target_lang.clone(),
                q.domain.clone(),
                Origin::AugmentedCandidate,
            )
        })
        .collect::<Result<_>>()?;
    let mut c = Corpus::new(triplets);
    c.provenance.insert("augmentation".into(), format!("external-candidates (sep {sep})"));
    Ok(c)
}

/// Splits an External-Candidates translation back into (translation,
/// external translation). `None` unless `sep` occurs exactly once.
pub fn split_candidate<'a>(translation: &'a [String], sep: &str) -> Option<(&'a [String], &'a [String])> {
    let mut hits = translation.iter().enumerate().filter(|(_, w)| *w == sep);
    let (pos, _) = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some((&translation[..pos], &translation[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn lang(c: &str) -> LangId {
        LangId::new(c).unwrap()
    }

    fn quad(ext_lang: &str, tgt: &str) -> ApeQuadruple {
        ApeQuadruple {
            source: t("e1 e2"),
            external_translation: t("u1 u2"),
            translation: t("t1 t2"),
            post_edit: t("p1 p2"),
            source_lang: lang("eng_Latn"),
            external_lang: lang(ext_lang),
            target_lang: lang(tgt),
            domain: "news".into(),
        }
    }

    fn corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| {
                    ApeTriplet::new(
                        vec!["mar_Deva".into(), format!("w{i}")],
                        vec![format!("m{i}")],
                        vec![format!("p{i}")],
                        lang("eng_Latn"),
                        lang("mar_Deva"),
                        "news",
                        Origin::Synthetic,
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    fn cipher(skip: &[usize]) -> CipherTranslator {
        let table: HashMap<String, String> = (0..50)
            .filter(|i| !skip.contains(i))
            .map(|i| (format!("w{i}"), format!("h{i}")))
            .collect();
        CipherTranslator::new().with_table(lang("eng_Latn"), lang("hin_Deva"), table)
    }

    fn ext_map() -> BTreeMap<LangId, LangId> {
        BTreeMap::from([(lang("mar_Deva"), lang("hin_Deva"))])
    }

    #[test]
    fn additional_pair_uses_external_as_source() {
        let c = additional_pair_triplets(&[quad("hin_Deva", "mar_Deva")]).unwrap();
        let tr = &c.triplets[0];
        assert_eq!(tr.source, t("u1 u2"));
        assert_eq!(tr.translation, t("t1 t2"));
        assert_eq!(tr.pair_label(), "hin_Deva-mar_Deva");
        assert_eq!(tr.origin, Origin::AugmentedPair);
        let c = additional_pair_triplets(&[quad("mar_Deva", "hin_Deva")]).unwrap();
        assert_eq!(c.triplets[0].pair_label(), "mar_Deva-hin_Deva");
        assert!(additional_pair_triplets(&[]).unwrap().is_empty());
    }

    #[test]
    fn candidates_join_with_sep_and_split_back() {
        let q = quad("hin_Deva", "mar_Deva");
        let c = external_candidate_triplets(&[q.clone()], DEFAULT_SEP).unwrap();
        assert_eq!(c.triplets[0].translation, t("t1 t2 <sep> u1 u2"));
        assert_eq!(c.triplets[0].pair_label(), "eng_Latn-mar_Deva");
        let (a, b) = split_candidate(&c.triplets[0].translation, DEFAULT_SEP).unwrap();
        assert_eq!((a, b), (q.translation.as_slice(), q.external_translation.as_slice()));
    }

    #[test]
    fn reserved_token_collision_is_rejected() {
        let mut q = quad("hin_Deva", "mar_Deva");
        q.post_edit = t("p1 <sep>");
        assert!(matches!(external_candidate_triplets(&[q], DEFAULT_SEP), Err(Error::Data(_))));
        assert!(quad("hin_Deva", "hin_Deva").validate().is_err());
    }

    #[test]
    fn sampling_is_seeded_and_without_replacement() {
        let c = corpus(50);
        let a = make_quadruples(&c, &cipher(&[]), 20, &ext_map(), 3).unwrap();
        let b = make_quadruples(&c, &cipher(&[]), 20, &ext_map(), 3).unwrap();
        assert_eq!(a, b);
        let mut srcs: Vec<_> = a.iter().map(|q| q.source.clone()).collect();
        srcs.sort();
        srcs.dedup();
        assert_eq!(srcs.len(), 20);
        // The LangId prefix is not part of the translated source.
        assert!(a.iter().all(|q| q.source.len() == 1 && q.external_translation[0].starts_with('h')));
    }

    #[test]
    fn whole_corpus_extends_every_triplet_once() {
        let c = corpus(50);
        let q = make_quadruples(&c, &cipher(&[]), 50, &ext_map(), 9).unwrap();
        let mut srcs: Vec<_> = q.iter().map(|q| q.source[0].clone()).collect();
        srcs.sort();
        srcs.dedup();
        assert_eq!(srcs.len(), 50);
        assert!(make_quadruples(&c, &cipher(&[]), 51, &ext_map(), 9).is_err());
    }

    #[test]
    fn failures_are_backfilled() {
        let c = corpus(50);
        let q = make_quadruples(&c, &cipher(&[1, 2, 3, 4, 5]), 45, &ext_map(), 1).unwrap();
        assert_eq!(q.len(), 45);
        let q = make_quadruples(&c, &cipher(&[1, 2, 3, 4, 5]), 48, &ext_map(), 1).unwrap();
        assert_eq!(q.len(), 45);
    }

    #[test]
    fn input_corpus_is_untouched() {
        let c = corpus(10);
        let before = c.clone();
        let q = make_quadruples(&c, &cipher(&[]), 10, &ext_map(), 0).unwrap();
        additional_pair_triplets(&q).unwrap();
        external_candidate_triplets(&q, DEFAULT_SEP).unwrap();
        assert_eq!(c, before);
    }
}
