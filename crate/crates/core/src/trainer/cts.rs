use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{Stage, TrainConfig, TrainMode, LR_SCHEDULE};
use super::history::{LogRecord, TrainLog, TransitionRecord};
use super::stage::{
    derive_seed, train_domain_adapt, train_stage1_nmt, train_stage3_finetune, train_synthetic_phase, StageSummary,
};
use crate::corpus::{do_nothing_ter, partition_cts_phases, Corpus, ParallelPair};
use crate::error::{Error, Result};
use crate::model::vocab::Vocab;
use crate::model::{load_checkpoint, save_checkpoint, ApeModel, ModelMode};

/// Everything a curriculum run consumes. Corpora are used as given, so any
/// LangId prefixing happens before they get here.
#[derive(Debug, Clone)]
pub struct CtsInputs {
    pub parallel: Vec<ParallelPair>,
    pub parallel_dev: Vec<ParallelPair>,
    pub synthetic: Corpus,
    /// Extra triplets used in stage 2 only.
    pub augmentation: Option<Corpus>,
    pub synthetic_dev: Corpus,
    pub authentic: Corpus,
    pub authentic_dev: Corpus,
    /// A vocabulary shared with other runs; built from these inputs when absent.
    pub vocab: Option<Vocab>,
}

#[derive(Debug, Clone, Default)]
pub struct CtsOptions {
    pub out_dir: PathBuf,
    /// Reuse stages already completed in `out_dir` with identical inputs.
    pub resume: bool,
    /// Stop once this stage is done (the run can be resumed later).
    pub stop_after: Option<Stage>,
    /// Content-addressed stage store shared between runs.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CtsOutcome {
    /// The stage-3 model, or the stage-2 model for domain-adapt runs.
    pub model: ApeModel,
    pub domain_models: BTreeMap<String, ApeModel>,
    pub log: TrainLog,
    pub finished: bool,
}

pub const LOG_FILE: &str = "train_log.jsonl";

fn hash_json<T: Serialize + ?Sized>(h: &mut Sha256, value: &T) {
    let bytes = serde_json::to_vec(value).expect("serializable");
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
}

fn hash_corpus(h: &mut Sha256, c: &Corpus) {
    hash_json(h, &c.triplets);
    hash_json(h, &c.annotations());
    hash_json(h, &c.split);
}

fn hex(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The joint subword vocabulary over parallel, synthetic and authentic
/// training text, with every target language id as an atomic token.
/// Augmentation triplets reuse it, which keeps stage 1 identical across
/// systems that differ only in augmentation.
pub fn build_vocab(inputs: &CtsInputs, merges: usize) -> Result<Vocab> {
    let langs = target_langids(inputs);
    let mut words: Vec<&str> = Vec::new();
    for p in &inputs.parallel {
        words.extend(p.source.iter().chain(&p.reference).map(String::as_str));
    }
    for c in [&inputs.synthetic, &inputs.authentic] {
        for t in &c.triplets {
            words.extend(t.source.iter().chain(&t.translation).chain(&t.post_edit).map(String::as_str));
        }
    }
    Vocab::train(words, merges, &langs)
}

fn target_langids(inputs: &CtsInputs) -> Vec<String> {
    let mut langs: BTreeSet<String> = inputs.parallel.iter().map(|p| p.target_lang.code().to_string()).collect();
    let corpora = [Some(&inputs.synthetic), inputs.augmentation.as_ref(), Some(&inputs.authentic)];
    for c in corpora.into_iter().flatten() {
        langs.extend(c.triplets.iter().map(|t| t.target_lang.code().to_string()));
    }
    langs.into_iter().collect()
}

/// A freshly initialized NMT-mode model for `inputs`.
pub fn init_model(inputs: &CtsInputs, config: &TrainConfig) -> Result<ApeModel> {
    config.validate()?;
    let vocab = match &inputs.vocab {
        Some(v) => v.clone(),
        None => build_vocab(inputs, config.bpe_merges)?,
    };
    ApeModel::new(config.model_config(target_langids(inputs)), vocab, derive_seed(config.seed, "init"))
}

/// Where a stage keeps its checkpoints, log segment and key.
struct StageFiles {
    dir: PathBuf,
    stem: String,
}

impl StageFiles {
    fn ckpt(&self, group: Option<&str>) -> PathBuf {
        match group {
            Some(g) => self.dir.join(format!("{}.{g}.ckpt", self.stem)),
            None => self.dir.join(format!("{}.ckpt", self.stem)),
        }
    }
    fn key(&self) -> PathBuf {
        self.dir.join(format!("{}.key", self.stem))
    }
    fn segment(&self) -> PathBuf {
        self.dir.join(format!("{}.log.jsonl", self.stem))
    }

    /// The stored result if its key matches.
    fn load(&self, key: &str) -> Result<Option<(TrainLog, Vec<(Option<String>, ApeModel)>)>> {
        match fs::read_to_string(self.key()) {
            Ok(k) if k.trim() == key => {}
            _ => return Ok(None),
        }
        let segment = TrainLog::load(self.segment())?;
        let Some(t) = segment.transitions().last().cloned() else {
            return Ok(None);
        };
        let mut models = Vec::new();
        for name in &t.checkpoints {
            // Names are `{stage}.ckpt` or `{stage}.{group}.ckpt`; stage names have no dots.
            let group = name
                .strip_suffix(".ckpt")
                .and_then(|r| r.split_once('.'))
                .map(|(_, g)| g.to_string());
            let path = self.ckpt(group.as_deref());
            if !path.exists() {
                return Ok(None);
            }
            models.push((group, load_checkpoint(&path)?));
        }
        Ok(Some((segment, models)))
    }

    fn store(&self, key: &str, segment: &TrainLog, models: &[(Option<String>, &ApeModel)]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        // Invalidate first so a crash mid-write never leaves a stale key.
        let _ = fs::remove_file(self.key());
        for (group, m) in models {
            save_checkpoint(m, self.ckpt(group.as_deref()))?;
        }
        segment.save(self.segment())?;
        fs::write(self.key(), key).map_err(|e| Error::io(self.key(), e))
    }
}

fn transition(stage: Stage, checkpoints: Vec<String>, summary: Option<&StageSummary>) -> TransitionRecord {
    TransitionRecord {
        stage: stage.to_string(),
        checkpoints,
        criterion: if stage == Stage::Nmt { "dev-loss" } else { "dev-ter" }.into(),
        best_epoch: summary.map(|s| s.best_epoch),
        best_value: summary.map(|s| s.best_value),
        skipped: summary.is_none(),
        schedule: LR_SCHEDULE.into(),
    }
}

struct Runner<'a> {
    opts: &'a CtsOptions,
    log: TrainLog,
}

impl Runner<'_> {
    /// Runs `train` unless a matching result is stored in the output
    /// directory (on resume) or the shared cache.
    fn stage<F>(&mut self, stage: Stage, key: &str, train: F) -> Result<Vec<(Option<String>, ApeModel)>>
    where
        F: FnOnce(&mut TrainLog) -> Result<(Vec<(Option<String>, ApeModel)>, Option<StageSummary>)>,
    {
        let local = StageFiles {
            dir: self.opts.out_dir.clone(),
            stem: stage.to_string(),
        };
        let shared = self.opts.cache_dir.as_ref().map(|d| StageFiles {
            dir: d.clone(),
            stem: key.to_string(),
        });
        let mut found = None;
        if self.opts.resume {
            found = local.load(key)?;
            if found.is_some() {
                log::info!("{stage}: reusing the completed stage in {}", local.dir.display());
            }
        }
        if found.is_none() {
            if let Some(s) = &shared {
                found = s.load(key)?;
                if found.is_some() {
                    log::info!("{stage}: reusing cached result {key}");
                }
            }
        }
        let (segment, models) = match found {
            Some((mut segment, models)) => {
                // Checkpoint names always refer to the output directory.
                if let Some(LogRecord::Transition(t)) = segment.records.last_mut() {
                    t.checkpoints = models
                        .iter()
                        .map(|(g, _)| file_name(&local.ckpt(g.as_deref())))
                        .collect();
                }
                (segment, models)
            }
            None => {
                let mut segment = TrainLog::default();
                let (models, summary) = train(&mut segment)?;
                let names = models.iter().map(|(g, _)| file_name(&local.ckpt(g.as_deref()))).collect();
                segment.push_transition(transition(stage, names, summary.as_ref()));
                if let Some(s) = &shared {
                    let refs: Vec<_> = models.iter().map(|(g, m)| (g.clone(), m)).collect();
                    s.store(key, &segment, &refs)?;
                }
                (segment, models)
            }
        };
        let refs: Vec<_> = models.iter().map(|(g, m)| (g.clone(), m)).collect();
        local.store(key, &segment, &refs)?;
        self.log.records.extend(segment.records);
        self.log.save(self.opts.out_dir.join(LOG_FILE))?;
        Ok(models)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn single(models: Vec<(Option<String>, ApeModel)>) -> ApeModel {
    models.into_iter().next().expect("one model").1
}

/// The full curriculum: NMT, synthetic phase 1 (hard triplets), synthetic
/// phase 2 (easy triplets), then authentic finetuning in the configured mode.
/// Every stage leaves a checkpoint in `opts.out_dir`; with `opts.resume`
/// completed stages with unchanged inputs are loaded instead of retrained.
pub fn run_cts(inputs: &CtsInputs, config: &TrainConfig, opts: &CtsOptions) -> Result<CtsOutcome> {
    config.validate()?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut runner = Runner {
        opts,
        log: TrainLog::default(),
    };
    let init = init_model(inputs, config)?;

    let mut h = Sha256::new();
    hash_json(&mut h, "cts/1");
    hash_json(&mut h, &config.for_stage(Stage::Nmt));
    hash_json(&mut h, &init.vocab);
    hash_json(&mut h, &inputs.parallel);
    hash_json(&mut h, &inputs.parallel_dev);
    let nmt_key = hex(h);
    let nmt = single(runner.stage(Stage::Nmt, &nmt_key, |log| {
        let mut model = init.clone();
        let s = train_stage1_nmt(&mut model, &inputs.parallel, &inputs.parallel_dev, config, log)?;
        Ok((vec![(None, model)], Some(s)))
    })?);
    if opts.stop_after == Some(Stage::Nmt) {
        return Ok(unfinished(nmt, runner.log));
    }

    let threshold = do_nothing_ter(&inputs.synthetic)?;
    let mut pool = inputs.synthetic.clone();
    if let Some(aug) = &inputs.augmentation {
        pool = concat(&pool, aug)?;
    }
    let (phase1, phase2) = partition_cts_phases(&pool, threshold)?;
    log::info!(
        "phase split at TER {threshold:.4}: {} hard, {} easy triplets",
        phase1.len(),
        phase2.len()
    );
    let mut prev_key = nmt_key;
    let mut model = nmt;
    for (phase, corpus) in [(Stage::SyntheticPhase1, &phase1), (Stage::SyntheticPhase2, &phase2)] {
        let mut h = Sha256::new();
        hash_json(&mut h, &prev_key);
        hash_json(&mut h, phase.as_str());
        hash_json(&mut h, &config.for_stage(phase));
        hash_corpus(&mut h, corpus);
        hash_corpus(&mut h, &inputs.synthetic_dev);
        let key = hex(h);
        let start = model;
        model = single(runner.stage(phase, &key, |log| {
            let mut m = start.clone();
            if m.mode == ModelMode::Nmt {
                m.add_translation_encoder(derive_seed(config.seed, "translation-encoder"))?;
            }
            let s = train_synthetic_phase(&mut m, phase, corpus, &inputs.synthetic_dev, config, log)?;
            Ok((vec![(None, m)], s))
        })?);
        prev_key = key;
        if opts.stop_after == Some(phase) {
            return Ok(unfinished(model, runner.log));
        }
    }

    let mut h = Sha256::new();
    hash_json(&mut h, &prev_key);
    hash_json(&mut h, "finetune");
    hash_json(&mut h, &config.for_stage(Stage::Finetune));
    hash_corpus(&mut h, &inputs.authentic);
    hash_corpus(&mut h, &inputs.authentic_dev);
    let key = hex(h);
    let stage2 = model;
    let models = runner.stage(Stage::Finetune, &key, |log| {
        if config.mode == TrainMode::DomainAdapt {
            let groups = train_domain_adapt(&stage2, &inputs.authentic, &inputs.authentic_dev, config, log)?;
            // Per-group criteria differ; the transition reports the first group.
            let first = groups.values().next().map(|(_, s)| s.clone());
            Ok((groups.into_iter().map(|(g, (m, _))| (Some(g), m)).collect(), first))
        } else {
            let mut m = stage2.clone();
            let s = train_stage3_finetune(&mut m, &inputs.authentic, &inputs.authentic_dev, config, log)?;
            Ok((vec![(None, m)], Some(s)))
        }
    })?;
    let (model, domain_models) = if config.mode == TrainMode::DomainAdapt {
        (stage2, models.into_iter().map(|(g, m)| (g.unwrap_or_default(), m)).collect())
    } else {
        (single(models), BTreeMap::new())
    };
    Ok(CtsOutcome {
        model,
        domain_models,
        log: runner.log,
        finished: true,
    })
}

fn unfinished(model: ApeModel, log: TrainLog) -> CtsOutcome {
    CtsOutcome {
        model,
        domain_models: BTreeMap::new(),
        log,
        finished: false,
    }
}

fn concat(a: &Corpus, b: &Corpus) -> Result<Corpus> {
    let mut triplets = a.triplets.clone();
    triplets.extend(b.triplets.iter().cloned());
    let mut c = Corpus::new(triplets).with_split(a.split);
    c.provenance = a.provenance.clone();
    c.provenance.extend(b.provenance.clone());
    Ok(c)
}

/// A model with the donor's architecture initialized from its checkpoint.
pub fn transfer_model(donor_path: impl AsRef<Path>, seed: u64) -> Result<ApeModel> {
    let path = donor_path.as_ref();
    let donor = load_checkpoint(path)?;
    let mut model = ApeModel::new(donor.config.clone(), donor.vocab.clone(), seed)?;
    if donor.mode == ModelMode::Ape {
        model.add_translation_encoder(derive_seed(seed, "translation-encoder"))?;
    }
    if donor.qe_heads {
        model.add_qe_heads(derive_seed(seed, "qe-heads"))?;
    }
    if donor.adapters {
        model.insert_adapters(donor.config.adapter_dim, derive_seed(seed, "adapters"))?;
    }
    model.init_from_checkpoint(path, true)?;
    model.metadata.insert("transfer_from".into(), path.display().to_string());
    Ok(model)
}

/// Initializes from another pair's checkpoint, then finetunes on `authentic`.
pub fn transfer_init(
    config: &TrainConfig,
    donor_path: impl AsRef<Path>,
    authentic: &Corpus,
    dev: &Corpus,
    log: &mut TrainLog,
) -> Result<(ApeModel, StageSummary)> {
    let mut model = transfer_model(donor_path, derive_seed(config.seed, "transfer"))?;
    let summary = train_stage3_finetune(&mut model, authentic, dev, config, log)?;
    Ok((model, summary))
}
