//! Greedy and beam-search decoding, plus the Do-Nothing baseline.

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::vocab::{BOS_ID, EOS_ID, PAD_ID};
use crate::model::{ApeModel, ExampleBuilder};

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_LENGTH_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Output length cap in subwords, excluding eos.
    pub max_len: usize,
    /// Exponent on the hypothesis length when normalizing scores.
    pub length_penalty: f64,
}

impl DecodeOptions {
    pub fn for_model(model: &ApeModel, beam: usize) -> Self {
        DecodeOptions {
            beam,
            max_len: model.config.max_len,
            length_penalty: DEFAULT_LENGTH_PENALTY,
        }
    }
}

fn scores(model: &ApeModel, memory: &crate::model::tape::Mat, prefix: &[usize]) -> Vec<f64> {
    let mut lp = model.next_log_probs(memory, prefix);
    lp[PAD_ID] = f64::NEG_INFINITY;
    lp[BOS_ID] = f64::NEG_INFINITY;
    lp
}

/// Argmax decoding; ties go to the smaller token id.
pub fn greedy(model: &ApeModel, source: &[usize], translation: &[usize], max_len: usize) -> Vec<usize> {
    let memory = model.memory(source, translation);
    let mut prefix = vec![BOS_ID];
    while prefix.len() <= max_len {
        let lp = scores(model, &memory, &prefix);
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        if best == EOS_ID {
            break;
        }
        prefix.push(best);
    }
    prefix.remove(0);
    prefix
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

fn normalized(h: &Hyp, len: usize, alpha: f64) -> f64 {
    h.logp / (len.max(1) as f64).powf(alpha)
}

/// Length-normalized beam search. Returns the best finished hypothesis, or
/// the best unfinished one once `max_len` is reached; eos is not included.
pub fn beam_search(model: &ApeModel, source: &[usize], translation: &[usize], opts: &DecodeOptions) -> Result<Vec<usize>> {
    if opts.beam < 1 {
        return Err(Error::Argument("beam must be at least 1".into()));
    }
    let memory = model.memory(source, translation);
    let mut live = vec![Hyp {
        tokens: vec![BOS_ID],
        logp: 0.0,
    }];
    let mut finished: Vec<(Hyp, f64)> = Vec::new();
    while !live.is_empty() && finished.len() < opts.beam && live[0].tokens.len() <= opts.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            for (t, v) in scores(model, &memory, &h.tokens).into_iter().enumerate() {
                if v.is_finite() {
                    cands.push((h.logp + v, i, t));
                }
            }
        }
        // Every candidate has the same length here, so raw log-probability ranks them.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(logp, i, t) in cands.iter().take(opts.beam) {
            let mut tokens = live[i].tokens.clone();
            if t == EOS_ID {
                // Length counts the eos but not the bos.
                let len = tokens.len();
                let h = Hyp { tokens, logp };
                let s = normalized(&h, len, opts.length_penalty);
                finished.push((h, s));
            } else {
                tokens.push(t);
                next.push(Hyp { tokens, logp });
            }
        }
        live = next;
    }
    let pool: Vec<(Hyp, f64)> = if finished.is_empty() {
        live.into_iter()
            .map(|h| {
                let s = normalized(&h, h.tokens.len() - 1, opts.length_penalty);
                (h, s)
            })
            .collect()
    } else {
        finished
    };
    let mut best: Option<(Hyp, f64)> = None;
    for (h, s) in pool {
        if best.as_ref().map_or(true, |b| s > b.1) {
            best = Some((h, s));
        }
    }
    let mut tokens = best.map(|(h, _)| h.tokens).unwrap_or_else(|| vec![BOS_ID]);
    tokens.remove(0);
    Ok(tokens)
}

/// Decodes every triplet of `corpus` into words. `beam == 1` decodes greedily.
pub fn decode_corpus(model: &ApeModel, corpus: &Corpus, opts: &DecodeOptions) -> Result<Vec<Vec<String>>> {
    if opts.beam < 1 {
        return Err(Error::Argument("beam must be at least 1".into()));
    }
    let builder = ExampleBuilder {
        vocab: &model.vocab,
        max_len: model.config.max_len,
        strict: model.config.strict_len,
    };
    corpus
        .triplets
        .par_iter()
        .map(|t| {
            let ex = builder.triplet(t, None)?;
            let ids = if opts.beam == 1 {
                greedy(model, &ex.source, &ex.translation, opts.max_len)
            } else {
                beam_search(model, &ex.source, &ex.translation, opts)?
            };
            Ok(model.vocab.decode(&ids))
        })
        .collect()
}

/// The Do-Nothing system: translations returned verbatim.
pub fn do_nothing(corpus: &Corpus) -> Vec<Vec<String>> {
    corpus.triplets.iter().map(|t| t.translation.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ApeTriplet, LangId, Origin};
    use crate::model::tests::tiny_model;
    use proptest::prelude::*;

    fn ape_model(seed: u64) -> ApeModel {
        let mut m = tiny_model(seed);
        m.add_translation_encoder(seed + 1).unwrap();
        m
    }

    fn corpus() -> Corpus {
        let l = |c: &str| LangId::new(c).unwrap();
        let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        Corpus::new(
            [("ka ki", "ma mi mu"), ("ko", "ta ti te to"), ("mo na ni", "ku")]
                .iter()
                .map(|(s, m)| ApeTriplet::new(w(s), w(m), w(m), l("eng_Latn"), l("hin_Deva"), "news", Origin::Authentic).unwrap())
                .collect(),
        )
    }

    #[test]
    fn zero_beam_is_rejected() {
        let m = ape_model(1);
        let opts = DecodeOptions {
            beam: 0,
            ..DecodeOptions::for_model(&m, 1)
        };
        assert!(beam_search(&m, &[5, 6], &[7], &opts).is_err());
        assert!(decode_corpus(&m, &corpus(), &opts).is_err());
    }

    #[test]
    fn do_nothing_returns_translations() {
        let c = corpus();
        let out = do_nothing(&c);
        for (h, t) in out.iter().zip(&c.triplets) {
            assert_eq!(h, &t.translation);
        }
        let refs: Vec<&[String]> = c.triplets.iter().map(|t| t.post_edit.as_slice()).collect();
        assert_eq!(
            crate::metrics::ter_corpus(&out, &refs).unwrap(),
            crate::corpus::do_nothing_ter(&c).unwrap()
        );
    }

    #[test]
    fn corpus_decoding_routes_beam_one_to_greedy() {
        let m = ape_model(3);
        let c = corpus();
        let greedy_out = decode_corpus(&m, &c, &DecodeOptions::for_model(&m, 1)).unwrap();
        let b = ExampleBuilder {
            vocab: &m.vocab,
            max_len: m.config.max_len,
            strict: false,
        };
        for (t, out) in c.triplets.iter().zip(&greedy_out) {
            let ex = b.triplet(t, None).unwrap();
            let opts = DecodeOptions::for_model(&m, 1);
            assert_eq!(out, &m.vocab.decode(&beam_search(&m, &ex.source, &ex.translation, &opts).unwrap()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn beam_one_matches_greedy(
            seed in 0u64..1000,
            src in proptest::collection::vec(5usize..20, 1..6),
            mt in proptest::collection::vec(5usize..20, 1..6),
            max_len in 1usize..8,
        ) {
            let m = ape_model(seed);
            let v = m.vocab.len();
            let src: Vec<usize> = src.into_iter().map(|t| t % v).collect();
            let mt: Vec<usize> = mt.into_iter().map(|t| t % v).collect();
            let opts = DecodeOptions { beam: 1, max_len, length_penalty: 1.0 };
            prop_assert_eq!(beam_search(&m, &src, &mt, &opts).unwrap(), greedy(&m, &src, &mt, max_len));
        }

        #[test]
        fn outputs_respect_length_and_specials(
            seed in 0u64..1000,
            beam in 1usize..5,
            max_len in 1usize..10,
            lp in 0.0f64..2.0,
        ) {
            let m = ape_model(seed);
            let opts = DecodeOptions { beam, max_len, length_penalty: lp };
            let out = beam_search(&m, &[5, 6, 7], &[8, 9], &opts).unwrap();
            prop_assert!(out.len() <= max_len);
            prop_assert!(out.iter().all(|&t| t != PAD_ID && t != BOS_ID && t != EOS_ID));
        }
    }
}
