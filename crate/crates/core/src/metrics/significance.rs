//! Paired approximate randomization over sentence-level TER edit tallies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METHOD: &str = "paired approximate randomization (sign-flip) on corpus TER";
pub const MIN_TRIALS: usize = 1000;

/// Edits and reference length for one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceEdits {
    pub edits: f64,
    pub ref_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    /// Observed corpus TER difference (a - b), as a fraction.
    pub observed_delta: f64,
    pub trials: usize,
}

fn corpus_ter(rows: impl Iterator<Item = SentenceEdits>) -> f64 {
    let (e, l) = rows.fold((0.0, 0.0), |(e, l), r| (e + r.edits, l + r.ref_len));
    e / l
}

/// Fraction of random per-sentence swaps whose |delta TER| reaches the observed one.
pub fn significance_test(
    a: &[SentenceEdits],
    b: &[SentenceEdits],
    trials: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("paired test over zero sentences".into()));
    }
    if trials < MIN_TRIALS {
        return Err(Error::Argument(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let observed = corpus_ter(a.iter().copied()) - corpus_ter(b.iter().copied());
    let threshold = observed.abs() - 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut swapped = vec![false; a.len()];
    for _ in 0..trials {
        for s in swapped.iter_mut() {
            *s = rng.gen::<bool>();
        }
        let pick = |first: bool| {
            a.iter()
                .zip(b)
                .zip(&swapped)
                .map(move |((x, y), &s)| if s == first { *y } else { *x })
        };
        let delta = corpus_ter(pick(true)) - corpus_ter(pick(false));
        if delta.abs() >= threshold {
            hits += 1;
        }
    }
    Ok(SignificanceResult {
        p_value: hits as f64 / trials as f64,
        observed_delta: observed,
        trials,
    })
}
