//! Evaluation metrics: TER with shifts, corpus BLEU, an exhaustive TER
//! oracle for testing, and paired significance testing.

mod bleu;
pub mod oracle;
mod significance;
mod ter;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu, BleuScore, MAX_ORDER, SMOOTHING};
pub use oracle::{brute_force_ter, oracle_min_edits, MoveRule, OracleLimits, ShiftClosure};
pub use significance::{significance_test, SentenceEdits, SignificanceResult, METHOD as SIGNIFICANCE_METHOD};
pub use ter::{align, edit_distance, ter, EditTrace, Link, LinkKind, Shift, MAX_SHIFT_DISTANCE, MAX_SHIFT_SPAN};

fn check_aligned(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Argument(format!(
            "{hyps} hypotheses for {refs} references"
        )));
    }
    Ok(())
}

/// Per-sentence TER edit tallies.
pub fn sentence_edits<H, R>(hyps: &[H], refs: &[R]) -> Result<Vec<SentenceEdits>>
where
    H: AsRef<[String]> + Sync,
    R: AsRef<[String]> + Sync,
{
    check_aligned(hyps.len(), refs.len())?;
    hyps.par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| {
            let (_, trace) = ter(h.as_ref(), r.as_ref())?;
            Ok(SentenceEdits {
                edits: trace.edits() as f64,
                ref_len: trace.ref_len as f64,
            })
        })
        .collect()
}

/// Micro-averaged TER: total edits over total reference tokens.
pub fn ter_corpus<H, R>(hyps: &[H], refs: &[R]) -> Result<f64>
where
    H: AsRef<[String]> + Sync,
    R: AsRef<[String]> + Sync,
{
    let rows = sentence_edits(hyps, refs)?;
    if rows.is_empty() {
        return Err(Error::Argument("TER over an empty corpus".into()));
    }
    let (e, l) = rows
        .iter()
        .fold((0.0, 0.0), |(e, l), r| (e + r.edits, l + r.ref_len));
    Ok(e / l)
}

/// Corpus TER, BLEU and the per-sentence rows used for significance testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Corpus TER as a fraction.
    pub ter: f64,
    pub bleu: f64,
    pub sentence_ters: Vec<f64>,
    pub sentence_edits: Vec<SentenceEdits>,
}

impl MetricReport {
    pub fn ter_percent(&self) -> f64 {
        self.ter * 100.0
    }
}

pub fn evaluate<H, R>(hyps: &[H], refs: &[R]) -> Result<MetricReport>
where
    H: AsRef<[String]> + Sync,
    R: AsRef<[String]> + Sync,
{
    let rows = sentence_edits(hyps, refs)?;
    if rows.is_empty() {
        return Err(Error::Argument("evaluation over an empty corpus".into()));
    }
    let (e, l) = rows
        .iter()
        .fold((0.0, 0.0), |(e, l), r| (e + r.edits, l + r.ref_len));
    let hyp_tokens: Vec<&[String]> = hyps.iter().map(AsRef::as_ref).collect();
    let ref_tokens: Vec<&[String]> = refs.iter().map(AsRef::as_ref).collect();
    Ok(MetricReport {
        ter: e / l,
        bleu: bleu(&hyp_tokens, &ref_tokens)?.score,
        sentence_ters: rows.iter().map(|r| r.edits / r.ref_len).collect(),
        sentence_edits: rows,
    })
}
