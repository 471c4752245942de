//! Exhaustive TER oracle for short sentences.
//!
//! The oracle explores every arrangement of the hypothesis reachable through
//! block moves (breadth-first, so each arrangement is reached with the fewest
//! shifts) and returns the minimum of `shifts + levenshtein(arrangement, ref)`.
//! It exists to check the greedy search, never to score real output.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

use super::ter::{align, apply_shift, edit_distance, legal_shifts, Shift};

#[derive(Debug, Clone, Copy)]
pub struct OracleLimits {
    pub max_len: usize,
    pub max_depth: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_len: 6,
            max_depth: 6,
        }
    }
}

/// Which block moves the oracle may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveRule {
    /// Any contiguous span to any position.
    Any,
    /// Moves the greedy search may consider: the span occurs in the
    /// reference and covers a misaligned token.
    RefMatching,
    /// [`MoveRule::RefMatching`] moves that strictly lower the edit distance.
    RefMatchingImproving,
}

fn all_shifts(n: usize) -> Vec<Shift> {
    let mut out = Vec::new();
    for start in 0..n {
        for len in 1..=(n - start) {
            for dest in 0..=(n - len) {
                if dest != start {
                    out.push(Shift { start, len, dest });
                }
            }
        }
    }
    out
}

fn check_limits(hyp_len: usize, ref_len: usize, limits: OracleLimits) -> Result<()> {
    if hyp_len > limits.max_len || ref_len > limits.max_len {
        return Err(Error::Argument(format!(
            "oracle limited to {} tokens, got {hyp_len}/{ref_len}",
            limits.max_len
        )));
    }
    if ref_len == 0 {
        return Err(Error::Argument("TER reference must be non-empty".into()));
    }
    Ok(())
}

/// Arrangements of one hypothesis reachable by unrestricted block moves,
/// with their minimum shift counts. Reusable across references.
#[derive(Debug, Clone)]
pub struct ShiftClosure<T> {
    states: Vec<(Vec<T>, usize)>,
}

impl<T: Clone + Eq + Hash> ShiftClosure<T> {
    pub fn new(hyp: &[T], limits: OracleLimits) -> Result<Self> {
        if hyp.len() > limits.max_len {
            return Err(Error::Argument(format!(
                "oracle limited to {} tokens, got {}",
                limits.max_len,
                hyp.len()
            )));
        }
        let moves = all_shifts(hyp.len());
        let mut seen: HashMap<Vec<T>, usize> = HashMap::new();
        seen.insert(hyp.to_vec(), 0);
        let mut states = vec![(hyp.to_vec(), 0)];
        let mut frontier = vec![hyp.to_vec()];
        for depth in 1..=limits.max_depth {
            let mut next = Vec::new();
            for s in &frontier {
                for &m in &moves {
                    let moved = apply_shift(s, m);
                    if !seen.contains_key(&moved) {
                        seen.insert(moved.clone(), depth);
                        states.push((moved.clone(), depth));
                        next.push(moved);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(ShiftClosure { states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Minimum `shifts + edit distance` against `reference`.
    pub fn min_edits(&self, reference: &[T]) -> usize {
        let mut best = usize::MAX;
        for (state, depth) in &self.states {
            if *depth >= best {
                continue;
            }
            // The edit distance is at least the length difference.
            if depth + state.len().abs_diff(reference.len()) >= best {
                continue;
            }
            best = best.min(depth + edit_distance(state, reference));
        }
        best
    }
}

/// Minimum `shifts + edit distance` using only moves allowed by `rule`.
pub fn oracle_min_edits<T: Clone + Eq + Hash>(
    hyp: &[T],
    reference: &[T],
    rule: MoveRule,
    limits: OracleLimits,
) -> Result<usize> {
    check_limits(hyp.len(), reference.len(), limits)?;
    if rule == MoveRule::Any {
        return Ok(ShiftClosure::new(hyp, limits)?.min_edits(reference));
    }
    let mut seen: HashMap<Vec<T>, usize> = HashMap::new();
    seen.insert(hyp.to_vec(), 0);
    let mut best = edit_distance(hyp, reference);
    let mut frontier = vec![hyp.to_vec()];
    for depth in 1..=limits.max_depth {
        let mut next = Vec::new();
        for s in &frontier {
            let (dist, links) = align(s, reference);
            for m in legal_shifts(s, reference, &links) {
                let moved = apply_shift(s, m);
                if seen.contains_key(&moved) {
                    continue;
                }
                let moved_dist = edit_distance(&moved, reference);
                if rule == MoveRule::RefMatchingImproving && moved_dist >= dist {
                    continue;
                }
                best = best.min(depth + moved_dist);
                seen.insert(moved.clone(), depth);
                next.push(moved);
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(best)
}

/// Exact TER (fraction) over all block-move sequences within `limits`.
pub fn brute_force_ter<T: Clone + Eq + Hash>(hyp: &[T], reference: &[T], limits: OracleLimits) -> Result<f64> {
    let edits = oracle_min_edits(hyp, reference, MoveRule::Any, limits)?;
    Ok(edits as f64 / reference.len() as f64)
}
