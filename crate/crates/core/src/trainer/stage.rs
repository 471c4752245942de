use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Stage, TrainConfig, TrainMode};
use super::history::{EpochRecord, NashStats, TrainLog};
use crate::corpus::{split_by_domain, Corpus, DomainGrouping, ParallelPair, Split};
use crate::decode::{decode_corpus, DecodeOptions};
use crate::error::{Error, Result};
use crate::losses::{
    collect_task_gradients, evaluate_task_losses, nash_combine, shared_task_gradients, DropoutSeed, NashSolution,
    TaskLosses, TaskStep, Tasks,
};
use crate::metrics::ter_corpus;
use crate::model::params::ParamStore;
use crate::model::tape::Mat;
use crate::model::{ApeModel, Example, ExampleBuilder, ParamRole};

/// Adam with bias correction. Parameters without a gradient are untouched.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else { continue };
            if !params.is_trainable(id) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(params.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// A 64-bit seed derived from the run seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub(crate) enum Dev<'a> {
    Loss(&'a [Example]),
    Ter {
        examples: &'a [Example],
        corpus: &'a Corpus,
    },
}

pub(crate) struct StageRun<'a> {
    pub stage: Stage,
    pub group: Option<String>,
    pub train: &'a [Example],
    pub dev: Dev<'a>,
    pub tasks: Tasks,
    pub mode: TrainMode,
}

/// Outcome of one stage (or one phase / adapter group).
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub best_epoch: usize,
    pub best_value: f64,
    pub epochs: usize,
    pub steps: usize,
}

fn combine(model: &ApeModel, step: TaskStep, mode: TrainMode, config: &TrainConfig) -> Result<(Vec<Option<Mat>>, Option<NashSolution>)> {
    let nash = if mode == TrainMode::NashMtl {
        Some(nash_combine(&shared_task_gradients(model, &step)?, config.nash_tol, config.nash_max_iters)?)
    } else {
        None
    };
    let TaskStep { ape, sent, word, .. } = step;
    let mut total = ape;
    for other in [sent, word] {
        for (t, g) in total.iter_mut().zip(other) {
            match (t.as_mut(), g) {
                (Some(t), Some(g)) => *t += &g,
                (None, Some(g)) => *t = Some(g),
                _ => {}
            }
        }
    }
    let Some((update, solution)) = nash else { return Ok((total, None)) };
    let mut offset = 0;
    for id in model.params.ids() {
        if !(model.params.is_trainable(id) && model.role(id) == ParamRole::Shared) {
            continue;
        }
        let shape = model.params.value(id).dim();
        let n = shape.0 * shape.1;
        total[id.0] = Some(Mat::from_shape_vec(shape, update[offset..offset + n].to_vec()).expect("shape"));
        offset += n;
    }
    Ok((total, Some(solution)))
}

fn dev_value(model: &ApeModel, run: &StageRun, config: &TrainConfig) -> Result<(TaskLosses, Option<f64>, f64)> {
    match &run.dev {
        Dev::Loss(ex) => {
            let l = evaluate_task_losses(model, ex, run.tasks, config.reduction)?;
            let total = l.ape + l.sent + l.word;
            Ok((l, None, total))
        }
        Dev::Ter { examples, corpus } => {
            let l = evaluate_task_losses(model, examples, run.tasks, config.reduction)?;
            let opts = DecodeOptions {
                beam: config.dev_beam,
                max_len: model.config.max_len,
                length_penalty: config.length_penalty,
            };
            let hyps = decode_corpus(model, corpus, &opts)?;
            let refs: Vec<&[String]> = corpus.triplets.iter().map(|t| t.post_edit.as_slice()).collect();
            let ter = ter_corpus(&hyps, &refs)?;
            Ok((l, Some(ter), ter))
        }
    }
}

fn check_finite(l: &TaskLosses, stage: Stage, epoch: usize) -> Result<()> {
    if [l.ape, l.sent, l.word].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.to_string(),
            epoch,
        })
    }
}

/// The shared epoch loop with early stopping. On return `model` holds the
/// best parameters seen, including the incoming ones (epoch 0). On
/// divergence the model is rolled back to the last good state.
pub(crate) fn train_loop(model: &mut ApeModel, run: &StageRun, config: &TrainConfig, log: &mut TrainLog) -> Result<StageSummary> {
    if run.train.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} training data", run.stage)));
    }
    let label = match &run.group {
        Some(g) => format!("{}/{g}", run.stage),
        None => run.stage.to_string(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &label));
    let mut adam = Adam::new(config, model.params.len());
    let (dev, dev_ter, criterion) = dev_value(model, run, config)?;
    check_finite(&dev, run.stage, 0)?;
    log.push_epoch(EpochRecord {
        stage: run.stage.to_string(),
        group: run.group.clone(),
        epoch: 0,
        steps: 0,
        learning_rate: 0.0,
        train: None,
        dev,
        dev_ter,
        criterion,
        best: true,
        nash: None,
    });
    let mut best = (criterion, 0usize, model.params.clone());
    let mut last_good = model.params.clone();
    let mut step = 0usize;
    let mut since_best = 0;
    let mut epochs = 0;
    let mut order: Vec<usize> = (0..run.train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if config.max_steps_per_epoch > 0 {
            chunks.truncate(config.max_steps_per_epoch);
        }
        let mut train = TaskLosses::default();
        let mut nash = (run.mode == TrainMode::NashMtl).then(NashStats::default);
        let mut lr = 0.0;
        for chunk in &chunks {
            step += 1;
            let batch: Vec<Example> = chunk.iter().map(|&i| run.train[i].clone()).collect();
            let dropout = (model.config.dropout > 0.0).then(|| DropoutSeed {
                rate: model.config.dropout,
                seed: rng.gen(),
            });
            let result = collect_task_gradients(model, &batch, run.tasks, config.reduction, dropout);
            let step_result = match result {
                Ok(s) => s,
                Err(Error::NonFinite(_)) => {
                    model.params = last_good;
                    return Err(Error::Diverged {
                        stage: label,
                        epoch,
                    });
                }
                Err(e) => return Err(e),
            };
            if check_finite(&step_result.losses, run.stage, epoch).is_err() {
                model.params = last_good;
                return Err(Error::Diverged {
                    stage: label,
                    epoch,
                });
            }
            train.ape += step_result.losses.ape / chunks.len() as f64;
            train.sent += step_result.losses.sent / chunks.len() as f64;
            train.word += step_result.losses.word / chunks.len() as f64;
            let (grads, solution) = combine(model, step_result, run.mode, config)?;
            if let (Some(stats), Some(s)) = (nash.as_mut(), solution.as_ref()) {
                stats.add(s);
            }
            lr = config.learning_rate_at(step);
            adam.step(&mut model.params, &grads, lr);
        }
        epochs = epoch;
        let (dev, dev_ter, criterion) = dev_value(model, run, config)?;
        if check_finite(&dev, run.stage, epoch).is_err() {
            model.params = last_good;
            return Err(Error::Diverged { stage: label, epoch });
        }
        last_good = model.params.clone();
        let improved = criterion < best.0;
        log.push_epoch(EpochRecord {
            stage: run.stage.to_string(),
            group: run.group.clone(),
            epoch,
            steps: step,
            learning_rate: lr,
            train: Some(train),
            dev,
            dev_ter,
            criterion,
            best: improved,
            nash,
        });
        log::info!("{label} epoch {epoch}: criterion {criterion:.5}{}", if improved { " (best)" } else { "" });
        if improved {
            best = (criterion, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("{label}: early stop after {epoch} epochs");
                break;
            }
        }
    }
    model.params = best.2;
    Ok(StageSummary {
        best_epoch: best.1,
        best_value: best.0,
        epochs,
        steps: step,
    })
}

fn builder(model: &ApeModel) -> ExampleBuilder<'_> {
    ExampleBuilder {
        vocab: &model.vocab,
        max_len: model.config.max_len,
        strict: model.config.strict_len,
    }
}

fn check_split(corpus: &Corpus, want: Split, what: &str) -> Result<()> {
    if corpus.split != want {
        return Err(Error::Data(format!("{what} must be a {want} split, found {}", corpus.split)));
    }
    Ok(())
}

/// Parallel pairs as NMT examples, each source prefixed with its target LangId.
pub fn parallel_examples(model: &ApeModel, pairs: &[ParallelPair]) -> Result<Vec<Example>> {
    let b = builder(model);
    pairs
        .iter()
        .map(|p| b.parallel(p, Some(p.target_lang.code())))
        .collect()
}

/// Triplets as APE examples; with `annotated`, QE targets come along (DA
/// scaled to [0, 1] by the configured range).
pub fn triplet_examples(model: &ApeModel, corpus: &Corpus, config: &TrainConfig, annotated: bool) -> Result<Vec<Example>> {
    let b = builder(model);
    if annotated && corpus.annotations().is_none() {
        return Err(Error::Mode("multitask training needs QE annotations".into()));
    }
    (0..corpus.len())
        .map(|i| {
            let ann = annotated.then(|| corpus.annotation_or_default(i));
            let mut ex = b.triplet(&corpus.triplets[i], ann.as_ref())?;
            ex.da = ex.da.map(|d| config.scale_da(d));
            Ok(ex)
        })
        .collect()
}

const APE_ONLY: Tasks = Tasks { ape: true, qe: false };

/// Stage 1: multilingual NMT on the merged parallel data, dev-loss criterion.
pub fn train_stage1_nmt(
    model: &mut ApeModel,
    train: &[ParallelPair],
    dev: &[ParallelPair],
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageSummary> {
    if model.mode != crate::model::ModelMode::Nmt {
        return Err(Error::Mode("stage 1 trains a single-encoder model".into()));
    }
    let train = parallel_examples(model, train)?;
    let dev = parallel_examples(model, dev)?;
    if dev.is_empty() {
        return Err(Error::EmptyCorpus("nmt dev data".into()));
    }
    let run = StageRun {
        stage: Stage::Nmt,
        group: None,
        train: &train,
        dev: Dev::Loss(&dev),
        tasks: APE_ONLY,
        mode: TrainMode::Single,
    };
    train_loop(model, &run, &config.for_stage(Stage::Nmt), log)
}

/// One synthetic phase on L_APE with a dev-TER criterion. `None` when the
/// phase is empty and was skipped.
pub fn train_synthetic_phase(
    model: &mut ApeModel,
    phase: Stage,
    corpus: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Option<StageSummary>> {
    if !matches!(phase, Stage::SyntheticPhase1 | Stage::SyntheticPhase2) {
        return Err(Error::Argument(format!("{phase} is not a synthetic phase")));
    }
    check_split(corpus, Split::Train, "synthetic training data")?;
    check_split(dev, Split::Dev, "synthetic dev data")?;
    if corpus.is_empty() {
        log::warn!("{phase}: empty phase, skipped");
        return Ok(None);
    }
    let train = triplet_examples(model, corpus, config, false)?;
    let dev_ex = triplet_examples(model, dev, config, false)?;
    let run = StageRun {
        stage: phase,
        group: None,
        train: &train,
        dev: Dev::Ter {
            examples: &dev_ex,
            corpus: dev,
        },
        tasks: APE_ONLY,
        mode: TrainMode::Single,
    };
    train_loop(model, &run, &config.for_stage(phase), log).map(Some)
}

/// Stage 2: phase 1 then phase 2, each with its own early stopping.
pub fn train_stage2_synthetic(
    model: &mut ApeModel,
    phase1: &Corpus,
    phase2: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<[Option<StageSummary>; 2]> {
    if model.mode != crate::model::ModelMode::Ape {
        return Err(Error::Mode("stage 2 needs the translation encoder".into()));
    }
    let a = train_synthetic_phase(model, Stage::SyntheticPhase1, phase1, dev, config, log)?;
    let b = train_synthetic_phase(model, Stage::SyntheticPhase2, phase2, dev, config, log)?;
    Ok([a, b])
}

/// Stage 3 in the single, ls-mtl or nash-mtl mode. QE heads are added when
/// a multitask mode needs them.
pub fn train_stage3_finetune(
    model: &mut ApeModel,
    authentic: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<StageSummary> {
    let config = config.for_stage(Stage::Finetune);
    check_split(authentic, Split::Train, "authentic training data")?;
    check_split(dev, Split::Dev, "authentic dev data")?;
    if model.mode != crate::model::ModelMode::Ape {
        return Err(Error::Mode("finetuning needs an APE-mode model".into()));
    }
    let tasks = match config.mode {
        TrainMode::Single => APE_ONLY,
        TrainMode::LsMtl | TrainMode::NashMtl => {
            if authentic.annotations().is_none() {
                return Err(Error::Mode(format!("{} needs QE-annotated training data", config.mode)));
            }
            if !model.qe_heads {
                model.add_qe_heads(derive_seed(config.seed, "qe-heads"))?;
            }
            Tasks { ape: true, qe: true }
        }
        TrainMode::DomainAdapt => {
            return Err(Error::Mode("domain-adapt runs through train_domain_adapt".into()));
        }
    };
    let train = triplet_examples(model, authentic, &config, tasks.qe)?;
    let dev_ex = triplet_examples(model, dev, &config, tasks.qe && dev.annotations().is_some())?;
    let run = StageRun {
        stage: Stage::Finetune,
        group: None,
        train: &train,
        dev: Dev::Ter {
            examples: &dev_ex,
            corpus: dev,
        },
        tasks,
        mode: config.mode,
    };
    train_loop(model, &run, &config, log)
}

/// The grouping from the config, or one group per domain present.
pub fn domain_grouping(config: &TrainConfig, corpus: &Corpus) -> DomainGrouping {
    if config.domain_groups.is_empty() && config.domain_default.is_none() {
        DomainGrouping {
            groups: corpus.triplets.iter().map(|t| (t.domain.clone(), t.domain.clone())).collect(),
            default: None,
        }
    } else {
        DomainGrouping {
            groups: config.domain_groups.clone(),
            default: config.domain_default.clone(),
        }
    }
}

/// Domain adaptation: per domain group, a copy of `base` gets decoder
/// adapters and only those are trained on the group's data.
pub fn train_domain_adapt(
    base: &ApeModel,
    authentic: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<BTreeMap<String, (ApeModel, StageSummary)>> {
    let config = TrainConfig {
        mode: TrainMode::DomainAdapt,
        ..config.for_stage(Stage::Finetune)
    };
    check_split(authentic, Split::Train, "authentic training data")?;
    check_split(dev, Split::Dev, "authentic dev data")?;
    let grouping = domain_grouping(&config, authentic);
    let train_groups = split_by_domain(authentic, &grouping)?;
    let dev_groups = split_by_domain(dev, &grouping)?;
    let mut out = BTreeMap::new();
    for (group, corpus) in train_groups {
        if corpus.is_empty() {
            log::warn!("domain group {group}: no training data, skipped");
            continue;
        }
        let group_dev = match dev_groups.get(&group) {
            Some(d) if !d.is_empty() => d.clone(),
            _ => {
                log::warn!("domain group {group}: no dev data, using the full dev set");
                dev.clone()
            }
        };
        let mut model = base.clone();
        if !model.adapters {
            model.insert_adapters(config.adapter_dim, derive_seed(config.seed, &format!("adapters/{group}")))?;
        }
        model.freeze_except_adapters()?;
        let train = triplet_examples(&model, &corpus, &config, false)?;
        let dev_ex = triplet_examples(&model, &group_dev, &config, false)?;
        let run = StageRun {
            stage: Stage::Finetune,
            group: Some(group.clone()),
            train: &train,
            dev: Dev::Ter {
                examples: &dev_ex,
                corpus: &group_dev,
            },
            tasks: APE_ONLY,
            mode: TrainMode::DomainAdapt,
        };
        let summary = train_loop(&mut model, &run, &config, log)?;
        model.metadata.insert("domain_group".into(), group.clone());
        out.insert(group, (model, summary));
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus("no domain group has training data".into()));
    }
    Ok(out)
}
