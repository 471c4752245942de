//! Translation edit rate with greedy block shifts.
//!
//! Link kinds are named from the hypothesis' point of view: an `Ins` link is
//! a hypothesis token with no reference counterpart, a `Del` link a reference
//! token the hypothesis is missing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest span considered for a single shift.
pub const MAX_SHIFT_SPAN: usize = 10;
/// Largest distance (in tokens) a span may travel in one shift.
pub const MAX_SHIFT_DISTANCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Match,
    Sub,
    Ins,
    Del,
}

/// One alignment link. `hyp` indexes the original (unshifted) hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub hyp: Option<usize>,
    pub reference: Option<usize>,
    pub kind: LinkKind,
}

/// A block move: `len` tokens starting at `start` are removed and reinserted
/// so that they begin at `dest` in the resulting sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shift {
    pub start: usize,
    pub len: usize,
    pub dest: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub shifts: usize,
    pub alignment: Vec<Link>,
    pub shift_ops: Vec<Shift>,
    pub ref_len: usize,
}

impl EditTrace {
    pub fn edits(&self) -> usize {
        self.insertions + self.deletions + self.substitutions + self.shifts
    }

    pub fn score(&self) -> f64 {
        self.edits() as f64 / self.ref_len as f64
    }

    /// Checks the trace invariants: counts equal link tallies and every
    /// token of both sides occurs in exactly one link.
    pub fn is_consistent(&self, hyp_len: usize) -> bool {
        let tally = |k| self.alignment.iter().filter(|l| l.kind == k).count();
        let mut hyp_seen = vec![0usize; hyp_len];
        let mut ref_seen = vec![0usize; self.ref_len];
        for l in &self.alignment {
            match (l.kind, l.hyp, l.reference) {
                (LinkKind::Match | LinkKind::Sub, Some(h), Some(r)) => {
                    if h >= hyp_len || r >= self.ref_len {
                        return false;
                    }
                    hyp_seen[h] += 1;
                    ref_seen[r] += 1;
                }
                (LinkKind::Ins, Some(h), None) if h < hyp_len => hyp_seen[h] += 1,
                (LinkKind::Del, None, Some(r)) if r < self.ref_len => ref_seen[r] += 1,
                _ => return false,
            }
        }
        tally(LinkKind::Ins) == self.insertions
            && tally(LinkKind::Del) == self.deletions
            && tally(LinkKind::Sub) == self.substitutions
            && self.shift_ops.len() == self.shifts
            && hyp_seen.iter().all(|&c| c == 1)
            && ref_seen.iter().all(|&c| c == 1)
    }
}

/// Plain Levenshtein distance (unit costs).
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let m = reference.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for j in 0..m {
            let diag = prev[j] + usize::from(*h != reference[j]);
            cur[j + 1] = diag.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Levenshtein alignment with a deterministic backtrace. Ties prefer a
/// hypothesis-only link, then a reference-only link, then the diagonal, which
/// matches repeated tokens as far left as possible.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> (usize, Vec<Link>) {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut links = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            links.push(Link {
                hyp: Some(i - 1),
                reference: None,
                kind: LinkKind::Ins,
            });
            i -= 1;
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            links.push(Link {
                hyp: None,
                reference: Some(j - 1),
                kind: LinkKind::Del,
            });
            j -= 1;
        } else {
            let same = hyp[i - 1] == reference[j - 1];
            links.push(Link {
                hyp: Some(i - 1),
                reference: Some(j - 1),
                kind: if same { LinkKind::Match } else { LinkKind::Sub },
            });
            i -= 1;
            j -= 1;
        }
    }
    links.reverse();
    (d[n * w + m], links)
}

/// Hypothesis positions that are not on a match link.
pub(crate) fn misaligned(hyp_len: usize, links: &[Link]) -> Vec<bool> {
    let mut out = vec![true; hyp_len];
    for l in links {
        if let (LinkKind::Match, Some(h)) = (l.kind, l.hyp) {
            out[h] = false;
        }
    }
    out
}

pub(crate) fn apply_shift<T: Clone>(seq: &[T], shift: Shift) -> Vec<T> {
    let mut rest: Vec<T> = Vec::with_capacity(seq.len());
    rest.extend_from_slice(&seq[..shift.start]);
    rest.extend_from_slice(&seq[shift.start + shift.len..]);
    let mut out = Vec::with_capacity(seq.len());
    out.extend_from_slice(&rest[..shift.dest]);
    out.extend_from_slice(&seq[shift.start..shift.start + shift.len]);
    out.extend_from_slice(&rest[shift.dest..]);
    out
}

pub(crate) fn occurs_in<T: PartialEq>(span: &[T], reference: &[T]) -> bool {
    span.len() <= reference.len() && reference.windows(span.len()).any(|w| w == span)
}

/// Every shift the greedy search may take from `seq`: the span occurs verbatim
/// in the reference and holds at least one token not on a match link.
pub(crate) fn legal_shifts<T: PartialEq>(seq: &[T], reference: &[T], links: &[Link]) -> Vec<Shift> {
    let n = seq.len();
    let bad = misaligned(n, links);
    let mut out = Vec::new();
    for start in 0..n {
        for len in 1..=MAX_SHIFT_SPAN.min(n - start) {
            let span = &seq[start..start + len];
            if !occurs_in(span, reference) {
                // Longer spans from this start cannot occur either.
                break;
            }
            if !bad[start..start + len].iter().any(|&b| b) {
                continue;
            }
            for dest in 0..=(n - len) {
                if dest != start && dest.abs_diff(start) <= MAX_SHIFT_DISTANCE {
                    out.push(Shift { start, len, dest });
                }
            }
        }
    }
    out
}

/// Runs the greedy shift search and returns the final token order as
/// indices into `hyp`, together with the applied shifts.
pub(crate) fn greedy_shifts<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> (Vec<usize>, Vec<Shift>) {
    let mut order: Vec<usize> = (0..hyp.len()).collect();
    let mut shifts = Vec::new();
    loop {
        let seq: Vec<T> = order.iter().map(|&i| hyp[i].clone()).collect();
        let (dist, links) = align(&seq, reference);
        if dist == 0 {
            break;
        }
        // (gain, len, start, distance, dest); ordering picks max gain, then
        // longest span, leftmost start, shortest move, smallest dest.
        let mut best: Option<(usize, Shift)> = None;
        for shift in legal_shifts(&seq, reference, &links) {
            let moved = apply_shift(&seq, shift);
            let new_dist = edit_distance(&moved, reference);
            if new_dist >= dist {
                continue;
            }
            let gain = dist - new_dist;
            let better = match &best {
                None => true,
                Some((g, b)) => {
                    let key = |g: usize, s: &Shift| {
                        (
                            std::cmp::Reverse(g),
                            std::cmp::Reverse(s.len),
                            s.start,
                            s.dest.abs_diff(s.start),
                            s.dest,
                        )
                    };
                    key(gain, &shift) < key(*g, b)
                }
            };
            if better {
                best = Some((gain, shift));
            }
        }
        match best {
            Some((_, shift)) => {
                order = apply_shift(&order, shift);
                shifts.push(shift);
            }
            None => break,
        }
    }
    (order, shifts)
}

/// Sentence-level TER of `hyp` against `reference`, as a fraction.
pub fn ter<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> Result<(f64, EditTrace)> {
    if reference.is_empty() {
        return Err(Error::Argument("TER reference must be non-empty".into()));
    }
    let (order, shift_ops) = greedy_shifts(hyp, reference);
    let seq: Vec<T> = order.iter().map(|&i| hyp[i].clone()).collect();
    let (_, links) = align(&seq, reference);
    let alignment: Vec<Link> = links
        .into_iter()
        .map(|l| Link {
            hyp: l.hyp.map(|p| order[p]),
            ..l
        })
        .collect();
    let count = |k| alignment.iter().filter(|l: &&Link| l.kind == k).count();
    let trace = EditTrace {
        insertions: count(LinkKind::Ins),
        deletions: count(LinkKind::Del),
        substitutions: count(LinkKind::Sub),
        shifts: shift_ops.len(),
        shift_ops,
        alignment,
        ref_len: reference.len(),
    };
    Ok((trace.score(), trace))
}
