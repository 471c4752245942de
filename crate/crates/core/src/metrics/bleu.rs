//! Corpus BLEU (4-gram, single reference).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const SMOOTHING: &str = "add-one on orders >= 2 with zero matches";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// BLEU on the 0..=100 scale.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu<H, R, T>(hyps: &[H], refs: &[R]) -> Result<BleuScore>
where
    H: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + std::hash::Hash,
{
    if hyps.len() != refs.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Argument("BLEU over an empty corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_exactly_100() {
        let c = vec![t("a b c d e"), t("x y")];
        assert_eq!(bleu(&c, &c).unwrap().score, 100.0);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu(&[t("a b c d")], &[t("w x y z")]).unwrap().score, 0.0);
    }

    #[test]
    fn short_hypothesis_brevity_penalty() {
        let b = bleu(&[t("a b c d")], &[t("a b c d e")]).unwrap();
        assert_eq!(b.precisions, [1.0; 4]);
        assert!((b.brevity_penalty - (-0.25f64).exp()).abs() < 1e-15);
        assert!((b.score - 77.88007830714049).abs() < 1e-9);
    }

    #[test]
    fn smoothing_applies_to_missing_higher_orders() {
        // Unigrams match, no bigram does: p2 = 1 / (3 + 1).
        let b = bleu(&[t("c a d b")], &[t("a b c d")]).unwrap();
        assert_eq!(b.precisions[0], 1.0);
        assert_eq!(b.precisions[1], 0.25);
        assert!(b.score > 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu::<Vec<&str>, Vec<&str>, &str>(&[], &[]).is_err());
        assert!(bleu(&[t("a")], &[t("a"), t("b")]).is_err());
    }
}
