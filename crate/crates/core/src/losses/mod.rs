//! Task losses (post-editing cross-entropy, sentence and word QE) and the
//! gradient combiners used for multitask steps.

pub mod nash;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::model::tape::{Graph, Mat, Var};
use crate::model::{ApeModel, Example, Forward, ParamRole};

pub use nash::{
    ls_combine_grads, nash_combine, NashSolution, NashStatus, TaskGradients, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Sum,
    /// Divide by the number of unmasked target tokens.
    #[default]
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::Config(format!("unknown reduction {other:?}"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Cross-entropy of `logits [B, T, V]` against `targets [B, T]` over unmasked positions.
pub fn ape_loss(logits: &Array3<f64>, targets: &Array2<usize>, mask: &Array2<bool>, reduction: Reduction) -> Result<f64> {
    let (b, t, _) = logits.dim();
    if targets.dim() != (b, t) || mask.dim() != (b, t) {
        return Err(Error::Argument("logits, targets and mask shapes disagree".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..b {
        for j in 0..t {
            if mask[[i, j]] {
                total -= log_softmax_at(logits.slice(ndarray::s![i, j, ..]), targets[[i, j]]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Argument("no unmasked target positions".into()));
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / count as f64,
    })
}

/// Mean squared error over available instances; 0 when none is available.
pub fn sent_qe_loss(pred: &[f64], target: &[f64], available: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != available.len() {
        return Err(Error::Argument("prediction, target and mask lengths disagree".into()));
    }
    let n = available.iter().filter(|&&a| a).count();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|((p, t), _)| (t - p).powi(2))
        .sum();
    Ok(sse / n as f64)
}

/// Mean OK/BAD cross-entropy over unmasked MT tokens. `logits[i]` holds one
/// row per unmasked token of sentence `i`.
pub fn word_qe_loss(logits: &[Array2<f64>], tags: &Array2<usize>, mask: &Array2<bool>) -> Result<f64> {
    if logits.len() != tags.nrows() || mask.dim() != tags.dim() {
        return Err(Error::Argument("word logits, tags and mask disagree".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, l) in logits.iter().enumerate() {
        let positions: Vec<usize> = (0..tags.ncols()).filter(|&j| mask[[i, j]]).collect();
        if l.nrows() != positions.len() || l.ncols() != 2 {
            return Err(Error::Argument(format!(
                "sentence {i}: {} word logits for {} tags",
                l.nrows(),
                positions.len()
            )));
        }
        for (r, &j) in positions.iter().enumerate() {
            total -= log_softmax_at(l.row(r), tags[[i, j]]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Argument("no unmasked word positions".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses {
    pub ape: f64,
    pub sent: f64,
    pub word: f64,
}

/// Unweighted sum of the three task losses.
pub fn ls_combine(losses: &TaskLosses) -> Result<f64> {
    let TaskLosses { ape, sent, word } = *losses;
    if ![ape, sent, word].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("task losses".into()));
    }
    Ok(sent + word + ape)
}

/// Which heads contribute to a graph built by [`example_losses`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tasks {
    pub ape: bool,
    pub qe: bool,
}

/// Unreduced loss nodes of one example. Sums, not means: the trainer scales
/// each by the batch-level normalizer when seeding backward.
pub struct ExampleLosses {
    /// Summed token NLL.
    pub ape: Option<Var>,
    pub ape_tokens: usize,
    /// Squared DA error, present only when the DA score is available.
    pub sent: Option<Var>,
    /// Summed word NLL.
    pub word: Option<Var>,
    pub word_tokens: usize,
}

/// Builds the forward graph of one example and its loss nodes.
pub fn example_losses(model: &ApeModel, g: &mut Graph, ex: &Example, tasks: Tasks, fwd: &mut Forward) -> Result<ExampleLosses> {
    let enc = model.encode(g, &ex.source, &ex.translation, fwd);
    let mut out = ExampleLosses {
        ape: None,
        ape_tokens: 0,
        sent: None,
        word: None,
        word_tokens: 0,
    };
    if tasks.ape {
        let (dec_in, dec_out) = ApeModel::teacher_forcing(&ex.target);
        let logits = model.decode(g, enc.repr, &dec_in, fwd);
        out.ape = Some(g.cross_entropy(logits, &dec_out));
        out.ape_tokens = dec_out.len();
    }
    if tasks.qe {
        let rows: Vec<usize> = ex.word_starts.iter().map(|&s| enc.mt_rows.start + s).collect();
        let (sent, word) = model.qe_heads(g, &enc, &rows)?;
        if let Some(da) = ex.da {
            out.sent = Some(g.squared_error(sent, &[da]));
        }
        if !ex.word_tags.is_empty() {
            out.word = Some(g.cross_entropy(word, &ex.word_tags));
            out.word_tokens = ex.word_tags.len();
        }
    }
    Ok(out)
}

/// Batch-level losses and per-task parameter gradients.
pub struct TaskStep {
    pub losses: TaskLosses,
    /// Gradient of each task loss, indexed by parameter id.
    pub ape: Vec<Option<Mat>>,
    pub sent: Vec<Option<Mat>>,
    pub word: Vec<Option<Mat>>,
}

/// Dropout settings for a training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSeed {
    pub rate: f64,
    pub seed: u64,
}

fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

fn add_into(acc: &mut [Option<Mat>], grads: Vec<Option<Mat>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
    }
}

/// Runs every example through the model and returns the batch losses
/// (APE and word losses are per-token means, the sentence loss a mean over
/// available DA scores) with one gradient per task. Examples are processed
/// in parallel and reduced in input order.
pub fn collect_task_gradients(
    model: &ApeModel,
    examples: &[Example],
    tasks: Tasks,
    reduction: Reduction,
    dropout: Option<DropoutSeed>,
) -> Result<TaskStep> {
    if examples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let ape_tokens: usize = examples.iter().map(|e| e.target.len() + 1).sum();
    let ape_norm = match reduction {
        Reduction::Mean => 1.0 / ape_tokens as f64,
        Reduction::Sum => 1.0,
    };
    let available = examples.iter().filter(|e| e.da.is_some()).count();
    let word_tokens: usize = examples.iter().map(|e| e.word_tags.len()).sum();
    let sent_norm = if available > 0 { 1.0 / available as f64 } else { 0.0 };
    let word_norm = if word_tokens > 0 { 1.0 / word_tokens as f64 } else { 0.0 };

    let per_example: Vec<Result<(TaskLosses, [Vec<Option<Mat>>; 3])>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut fwd = match dropout {
                Some(d) => Forward::train(d.rate, example_seed(d.seed, i)),
                None => Forward::eval(),
            };
            let mut g = Graph::new(&model.params);
            let l = example_losses(model, &mut g, ex, tasks, &mut fwd)?;
            let empty = || (0..model.params.len()).map(|_| None).collect::<Vec<_>>();
            let mut losses = TaskLosses::default();
            let mut out = [empty(), empty(), empty()];
            if let Some(v) = l.ape {
                losses.ape = g.scalar(v) * ape_norm;
                out[0] = g.backward(v, ape_norm).by_param;
            }
            if let Some(v) = l.sent {
                losses.sent = g.scalar(v) * sent_norm;
                out[1] = g.backward(v, sent_norm).by_param;
            }
            if let Some(v) = l.word {
                losses.word = g.scalar(v) * word_norm;
                out[2] = g.backward(v, word_norm).by_param;
            }
            Ok((losses, out))
        })
        .collect();

    let n = model.params.len();
    let mut step = TaskStep {
        losses: TaskLosses::default(),
        ape: vec![None; n],
        sent: vec![None; n],
        word: vec![None; n],
    };
    for r in per_example {
        let (l, [a, s, w]) = r?;
        step.losses.ape += l.ape;
        step.losses.sent += l.sent;
        step.losses.word += l.word;
        add_into(&mut step.ape, a);
        add_into(&mut step.sent, s);
        add_into(&mut step.word, w);
    }
    for (name, grads) in [("ape", &step.ape), ("sent", &step.sent), ("word", &step.word)] {
        if grads.iter().flatten().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of task {name}")));
        }
    }
    Ok(step)
}

/// Forward-only batch losses, normalized as in [`collect_task_gradients`].
pub fn evaluate_task_losses(model: &ApeModel, examples: &[Example], tasks: Tasks, reduction: Reduction) -> Result<TaskLosses> {
    if examples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let sums: Vec<Result<(f64, usize, f64, usize, f64, usize)>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::inference(&model.params);
            let l = example_losses(model, &mut g, ex, tasks, &mut Forward::eval())?;
            let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
            Ok((v(l.ape), l.ape_tokens, v(l.sent), usize::from(l.sent.is_some()), v(l.word), l.word_tokens))
        })
        .collect();
    let (mut ape, mut ape_n, mut sent, mut sent_n, mut word, mut word_n) = (0.0, 0, 0.0, 0, 0.0, 0);
    for r in sums {
        let (a, an, s, sn, w, wn) = r?;
        ape += a;
        ape_n += an;
        sent += s;
        sent_n += sn;
        word += w;
        word_n += wn;
    }
    let mean = |total: f64, n: usize| if n > 0 { total / n as f64 } else { 0.0 };
    Ok(TaskLosses {
        ape: match reduction {
            Reduction::Mean => mean(ape, ape_n),
            Reduction::Sum => ape,
        },
        sent: mean(sent, sent_n),
        word: mean(word, word_n),
    })
}

/// Flattens per-task gradients over the shared trainable parameters, in
/// parameter-id order. Missing gradients count as zeros.
pub fn shared_task_gradients(model: &ApeModel, step: &TaskStep) -> Result<TaskGradients> {
    let ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.is_trainable(id) && model.role(id) == ParamRole::Shared)
        .collect();
    let flatten = |grads: &[Option<Mat>]| -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| match &grads[id.0] {
                Some(m) => m.iter().copied().collect::<Vec<_>>(),
                None => vec![0.0; model.params.value(id).len()],
            })
            .collect()
    };
    TaskGradients::new(
        vec!["ape".into(), "sent".into(), "word".into()],
        vec![flatten(&step.ape), flatten(&step.sent), flatten(&step.word)],
    )
}
