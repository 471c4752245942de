//! The experiment grid: trains each system (reusing shared curriculum
//! stages), decodes the test splits, scores them and tests every row
//! against its baseline row.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{additional_pair_triplets, external_candidate_triplets, make_quadruples, ExternalTranslator, DEFAULT_SEP};
use crate::corpus::{merge_multilingual, prefix_langid, Corpus, DomainGrouping, LangId, LangIdMode, ParallelPair, Split};
use crate::decode::{decode_corpus, do_nothing, DecodeOptions};
use crate::error::{Error, Result};
use crate::metrics::{self, significance_test, SentenceEdits, MAX_SHIFT_DISTANCE, MAX_SHIFT_SPAN, SIGNIFICANCE_METHOD, SMOOTHING};
use crate::model::vocab::Vocab;
use crate::model::{save_checkpoint, ApeModel};
use crate::toy::{self, ToyData, ToyPair, Noise};
use crate::trainer::{
    build_vocab, derive_seed, domain_grouping, run_cts, transfer_init, CtsInputs, CtsOptions, Stage, TrainConfig, TrainLog, TrainMode,
};

pub const SIGNIFICANCE_TRIALS: usize = 10_000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Marks rows whose difference from the baseline is not significant.
pub const INSIGNIFICANT: &str = "*";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SystemId {
    #[serde(rename = "do-nothing")]
    DoNothing,
    #[serde(rename = "baseline-ape")]
    BaselineApe,
    #[serde(rename = "transfer")]
    Transfer,
    #[serde(rename = "wo-langid")]
    WoLangid,
    #[serde(rename = "only-auth-langid")]
    OnlyAuthLangid,
    #[serde(rename = "w-langid")]
    WLangid,
    #[serde(rename = "w-langid+pairs")]
    WLangidPairs,
    #[serde(rename = "w-langid+candidates")]
    WLangidCandidates,
    #[serde(rename = "mtl-ls")]
    MtlLs,
    #[serde(rename = "mtl-nash")]
    MtlNash,
    #[serde(rename = "mtl-nash+dataaug")]
    MtlNashDataaug,
    #[serde(rename = "domain-adapt")]
    DomainAdapt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    AdditionalPairs,
    ExternalCandidates,
}

impl SystemId {
    pub const ALL: [SystemId; 12] = [
        SystemId::DoNothing,
        SystemId::BaselineApe,
        SystemId::Transfer,
        SystemId::WoLangid,
        SystemId::OnlyAuthLangid,
        SystemId::WLangid,
        SystemId::WLangidPairs,
        SystemId::WLangidCandidates,
        SystemId::MtlLs,
        SystemId::MtlNash,
        SystemId::MtlNashDataaug,
        SystemId::DomainAdapt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::DoNothing => "do-nothing",
            SystemId::BaselineApe => "baseline-ape",
            SystemId::Transfer => "transfer",
            SystemId::WoLangid => "wo-langid",
            SystemId::OnlyAuthLangid => "only-auth-langid",
            SystemId::WLangid => "w-langid",
            SystemId::WLangidPairs => "w-langid+pairs",
            SystemId::WLangidCandidates => "w-langid+candidates",
            SystemId::MtlLs => "mtl-ls",
            SystemId::MtlNash => "mtl-nash",
            SystemId::MtlNashDataaug => "mtl-nash+dataaug",
            SystemId::DomainAdapt => "domain-adapt",
        }
    }

    /// Row label used in the human-readable report.
    pub fn label(self) -> &'static str {
        match self {
            SystemId::DoNothing => "Do Nothing",
            SystemId::BaselineApe => "Baseline APE",
            SystemId::Transfer => "Transfer Learning",
            SystemId::WoLangid => "w/o-LangID",
            SystemId::OnlyAuthLangid => "Only Authentic w/-LangID",
            SystemId::WLangid => "w/-LangID",
            SystemId::WLangidPairs => "w/-LangID + Additional Pairs",
            SystemId::WLangidCandidates => "w/-LangID + External Candidates",
            SystemId::MtlLs => "MTL-MAPE (LS-MTL)",
            SystemId::MtlNash => "MTL-MAPE (Nash)",
            SystemId::MtlNashDataaug => "MTL-MAPE (Nash) + DataAug",
            SystemId::DomainAdapt => "DomainAdapt",
        }
    }

    /// The row this system is tested against.
    pub fn baseline(self) -> Option<SystemId> {
        match self {
            SystemId::DoNothing => None,
            SystemId::BaselineApe => Some(SystemId::DoNothing),
            SystemId::Transfer | SystemId::WoLangid | SystemId::OnlyAuthLangid | SystemId::WLangid => {
                Some(SystemId::BaselineApe)
            }
            _ => Some(SystemId::WLangid),
        }
    }

    /// Trained once on every pair rather than once per pair.
    pub fn multilingual(self) -> bool {
        !matches!(self, SystemId::DoNothing | SystemId::BaselineApe | SystemId::Transfer)
    }

    pub fn langid_mode(self) -> LangIdMode {
        match self {
            SystemId::DoNothing | SystemId::BaselineApe | SystemId::Transfer | SystemId::WoLangid => LangIdMode::None,
            SystemId::OnlyAuthLangid => LangIdMode::OnlyAuthentic,
            _ => LangIdMode::All,
        }
    }

    pub fn augmentation(self) -> Augmentation {
        match self {
            SystemId::WLangidPairs | SystemId::MtlNashDataaug => Augmentation::AdditionalPairs,
            SystemId::WLangidCandidates => Augmentation::ExternalCandidates,
            _ => Augmentation::None,
        }
    }

    pub fn train_mode(self) -> TrainMode {
        match self {
            SystemId::MtlLs => TrainMode::LsMtl,
            SystemId::MtlNash | SystemId::MtlNashDataaug => TrainMode::NashMtl,
            SystemId::DomainAdapt => TrainMode::DomainAdapt,
            _ => TrainMode::Single,
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system {s:?}")))
    }
}

/// One experiment row group: a system, the pairs it is evaluated on, its
/// training configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Row name; the system id unless the row is an ablation variant.
    pub name: String,
    pub system: SystemId,
    pub pairs: Vec<String>,
    pub config: TrainConfig,
    pub seed: u64,
    /// Augmentation triplets in total, split equally over the directions.
    pub augmentation_size: usize,
}

impl ExperimentSpec {
    pub fn new(system: SystemId, pairs: Vec<String>, config: TrainConfig, seed: u64, augmentation_size: usize) -> Self {
        ExperimentSpec {
            name: system.as_str().to_string(),
            system,
            pairs,
            config,
            seed,
            augmentation_size,
        }
    }

    /// The configuration actually trained: the spec seed and the system's mode.
    pub fn train_config(&self) -> TrainConfig {
        let mode = self.system.train_mode();
        TrainConfig {
            seed: self.seed,
            mode,
            stage: Stage::Finetune,
            ..self.config.clone()
        }
    }
}

/// Corpora of every pair plus the external MT system used for augmentation.
#[derive(Clone)]
pub struct ExperimentData {
    pub pairs: Vec<ToyPair>,
    pub translator: Option<Arc<dyn ExternalTranslator>>,
}

impl fmt::Debug for ExperimentData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperimentData")
            .field("pairs", &self.pairs.iter().map(ToyPair::label).collect::<Vec<_>>())
            .field("translator", &self.translator.is_some())
            .finish()
    }
}

/// Label of the external MT system simulated over the toy world.
pub const TOY_EXTERNAL_MT: &str = "external";

impl ExperimentData {
    /// Toy corpora with the world's noisy MT as the external system.
    pub fn from_toy(data: ToyData) -> Self {
        let translator: Arc<dyn ExternalTranslator> = Arc::new(data.world.mt(Noise::SYNTHETIC, TOY_EXTERNAL_MT));
        ExperimentData {
            pairs: data.pairs,
            translator: Some(translator),
        }
    }

    /// Loads a directory in the toy layout.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(ExperimentData::from_toy(toy::load(dir)?))
    }

    pub fn pair(&self, label: &str) -> Result<&ToyPair> {
        self.pairs
            .iter()
            .find(|p| p.label() == label)
            .ok_or_else(|| Error::Argument(format!("no pair {label} in the experiment data")))
    }

    pub fn pair_labels(&self) -> Vec<String> {
        self.pairs.iter().map(ToyPair::label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub group: String,
    pub sentences: usize,
    /// Corpus TER x 100.
    pub ter: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub pair: String,
    /// Corpus TER x 100; absent for failed rows.
    pub ter: Option<f64>,
    pub bleu: Option<f64>,
    pub baseline: Option<String>,
    pub p: Option<f64>,
    pub marker: String,
    pub error: Option<String>,
    /// Per-group scores of domain-adapted systems; the row scores are their mean.
    pub domains: Vec<DomainScore>,
    /// Augmentation triplets per direction (`src->tgt`).
    pub augmentation: BTreeMap<String, usize>,
}

impl ReportRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    /// Exact text processing and scoring used for every number in the table.
    pub preprocessing: String,
}

impl ReportTable {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    pub fn row(&self, system: &str, pair: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system && r.pair == pair)
    }

    /// `system\tpair\tTER\tBLEU\tp\tmarker`; failed rows carry `failed`
    /// in the marker column and `NA` scores.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("system\tpair\tTER\tBLEU\tp\tmarker\n");
        let num = |v: Option<f64>, digits: usize| v.map_or("NA".to_string(), |v| format!("{v:.digits$}"));
        for r in &self.rows {
            let marker = if r.failed() { "failed" } else { r.marker.as_str() };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.system,
                r.pair,
                num(r.ter, 2),
                num(r.bleu, 2),
                num(r.p, 4),
                marker
            );
        }
        out
    }

    /// One line per system with TER and BLEU for each pair.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<&str> = Vec::new();
        let mut systems: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !pairs.contains(&r.pair.as_str()) {
                pairs.push(&r.pair);
            }
            if !systems.contains(&r.system.as_str()) {
                systems.push(&r.system);
            }
        }
        let label = |s: &str| SystemId::from_str(s).map(|id| id.label().to_string()).unwrap_or_else(|_| s.to_string());
        let width = systems.iter().map(|s| label(s).len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:width$}", "Technique");
        for p in &pairs {
            let _ = write!(out, " | {:>15}", format!("{p} TER   BLEU"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        let mut notes = Vec::new();
        for s in &systems {
            let _ = write!(out, "{:width$}", label(s));
            for p in &pairs {
                let cell = match self.row(s, p) {
                    Some(r) if !r.failed() => format!(
                        "{:>6.2}{:1} {:>6.2}",
                        r.ter.unwrap_or(f64::NAN),
                        r.marker,
                        r.bleu.unwrap_or(f64::NAN)
                    ),
                    Some(r) => {
                        notes.push(format!("{s} {p}: {}", r.error.as_deref().unwrap_or("failed")));
                        "failed".to_string()
                    }
                    None => "-".to_string(),
                };
                let _ = write!(out, " | {cell:>15}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\n{INSIGNIFICANT} difference from the row's baseline is not significant (p >= {SIGNIFICANCE_LEVEL})."
        );
        let _ = writeln!(out, "{}", self.preprocessing);
        for n in notes {
            let _ = writeln!(out, "failed: {n}");
        }
        out
    }

    /// Writes the TSV, text and JSON forms into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(REPORT_TSV, self.to_tsv())?;
        write(REPORT_TEXT, self.to_text())?;
        write(REPORT_JSON, serde_json::to_string_pretty(self)?)
    }
}

pub fn preprocessing_note() -> String {
    format!(
        "Scoring: NFC-normalized whitespace tokens with punctuation detached, case preserved; \
         TER with shifts (span <= {MAX_SHIFT_SPAN}, distance <= {MAX_SHIFT_DISTANCE}) reported x100; \
         BLEU-4 with {SMOOTHING}; significance: {SIGNIFICANCE_METHOD}, {SIGNIFICANCE_TRIALS} trials."
    )
}

/// Scores of one system on one test split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ter: f64,
    pub bleu: f64,
    pub sentence_edits: Vec<SentenceEdits>,
    pub domains: Vec<DomainScore>,
}

/// Corpus TER (x100), BLEU and per-sentence edits of `hyps` against `refs`.
pub fn evaluate_system<H, R>(hyps: &[H], refs: &[R]) -> Result<Evaluation>
where
    H: AsRef<[String]> + Sync,
    R: AsRef<[String]> + Sync,
{
    let r = metrics::evaluate(hyps, refs)?;
    Ok(Evaluation {
        ter: r.ter_percent(),
        bleu: r.bleu,
        sentence_edits: r.sentence_edits,
        domains: Vec::new(),
    })
}

/// A trained system: one model, or one model per domain group.
#[derive(Debug, Clone)]
struct Trained {
    model: ApeModel,
    domain_models: BTreeMap<String, ApeModel>,
    grouping: Option<DomainGrouping>,
    augmentation: BTreeMap<String, usize>,
}

struct Grid<'a> {
    data: &'a ExperimentData,
    out_dir: PathBuf,
    trained: BTreeMap<String, std::result::Result<Arc<Trained>, String>>,
}

fn refs(c: &Corpus) -> Vec<Vec<String>> {
    c.triplets.iter().map(|t| t.post_edit.clone()).collect()
}

impl Grid<'_> {
    fn system_dir(&self, spec: &ExperimentSpec, pair: Option<&str>) -> PathBuf {
        let dir = self.out_dir.join("systems").join(&spec.name);
        match pair {
            Some(p) => dir.join(p),
            None => dir,
        }
    }

    fn opts(&self, out_dir: PathBuf) -> CtsOptions {
        CtsOptions {
            out_dir,
            resume: true,
            stop_after: None,
            cache_dir: Some(self.out_dir.join("cache")),
        }
    }

    /// Trains (or recalls) `spec` for `pair`, or for all pairs when multilingual.
    fn trained(&mut self, spec: &ExperimentSpec, pair: &str) -> std::result::Result<Arc<Trained>, String> {
        let memo = if spec.system.multilingual() {
            spec.name.clone()
        } else {
            format!("{}/{pair}", spec.name)
        };
        if let Some(t) = self.trained.get(&memo) {
            return t.clone();
        }
        log::info!("training {memo}");
        let result = self.train(spec, pair).map(Arc::new).map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::error!("{memo}: {e}");
        }
        self.trained.insert(memo, result.clone());
        result
    }

    fn train(&mut self, spec: &ExperimentSpec, pair: &str) -> Result<Trained> {
        let config = spec.train_config();
        match spec.system {
            SystemId::DoNothing => Err(Error::Argument("do-nothing is not trained".into())),
            SystemId::BaselineApe => {
                let inputs = bilingual_inputs(self.data, pair, config.bpe_merges)?;
                let out = run_cts(&inputs, &config, &self.opts(self.system_dir(spec, Some(pair))))?;
                Ok(Trained {
                    model: out.model,
                    domain_models: BTreeMap::new(),
                    grouping: None,
                    augmentation: BTreeMap::new(),
                })
            }
            SystemId::Transfer => self.train_transfer(spec, pair),
            _ => self.train_multilingual(spec),
        }
    }

    /// Finetunes the other pair's baseline APE model on this pair.
    fn train_transfer(&mut self, spec: &ExperimentSpec, pair: &str) -> Result<Trained> {
        let others: Vec<String> = self.data.pair_labels().into_iter().filter(|l| l != pair).collect();
        let [donor_pair] = others.as_slice() else {
            return Err(Error::Data(format!(
                "transfer needs exactly one other pair, found {}",
                others.len()
            )));
        };
        let donor_spec = ExperimentSpec {
            name: format!("{}-donor", spec.name),
            system: SystemId::BaselineApe,
            ..spec.clone()
        };
        self.trained(&donor_spec, donor_pair).map_err(Error::Data)?;
        let donor_path = self.system_dir(&donor_spec, Some(donor_pair)).join("finetune.ckpt");
        let p = self.data.pair(pair)?;
        let dir = self.system_dir(spec, Some(pair));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let config = spec.train_config();
        let mut log = TrainLog::default();
        let (model, _) = transfer_init(&config, &donor_path, &p.authentic_train, &p.authentic_dev, &mut log)?;
        save_checkpoint(&model, dir.join("transfer.ckpt"))?;
        log.save(dir.join(crate::trainer::LOG_FILE))?;
        Ok(Trained {
            model,
            domain_models: BTreeMap::new(),
            grouping: None,
            augmentation: BTreeMap::new(),
        })
    }

    fn train_multilingual(&mut self, spec: &ExperimentSpec) -> Result<Trained> {
        let config = spec.train_config();
        let (inputs, counts) = multilingual_inputs(self.data, spec)?;
        let dir = self.system_dir(spec, None);
        if let Some(aug) = &inputs.augmentation {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("augmentation.manifest.json");
            fs::write(&path, serde_json::to_string_pretty(&aug.manifest())?).map_err(|e| Error::io(&path, e))?;
        }
        let out = run_cts(&inputs, &config, &self.opts(dir))?;
        let grouping = (spec.system.train_mode() == TrainMode::DomainAdapt)
            .then(|| domain_grouping(&config, &inputs.authentic));
        Ok(Trained {
            model: out.model,
            domain_models: out.domain_models,
            grouping,
            augmentation: counts,
        })
    }

    fn evaluate(&mut self, spec: &ExperimentSpec, pair: &str) -> Result<(Evaluation, BTreeMap<String, usize>)> {
        let p = self.data.pair(pair)?;
        let test = &p.authentic_test;
        let references = refs(test);
        if spec.system == SystemId::DoNothing {
            return Ok((evaluate_system(&do_nothing(test), &references)?, BTreeMap::new()));
        }
        let trained = self.trained(spec, pair).map_err(Error::Data)?;
        let langs: Vec<LangId> = self.data.pairs.iter().map(|p| p.target.clone()).collect();
        let test = prefix_langid(test, spec.system.langid_mode(), &langs)?;
        let config = spec.train_config();
        let opts = |m: &ApeModel| DecodeOptions {
            length_penalty: config.length_penalty,
            ..DecodeOptions::for_model(m, config.eval_beam)
        };
        let eval = match &trained.grouping {
            None => evaluate_system(&decode_corpus(&trained.model, &test, &opts(&trained.model))?, &references)?,
            Some(grouping) => {
                // Each sentence goes to its group's model; the row reports the
                // mean of per-group scores and tests the pooled output.
                let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (i, t) in test.triplets.iter().enumerate() {
                    let g = grouping
                        .group_of(&t.domain)
                        .filter(|g| trained.domain_models.contains_key(*g))
                        .unwrap_or("")
                        .to_string();
                    by_group.entry(g).or_default().push(i);
                }
                let mut hyps = vec![Vec::new(); test.len()];
                let mut domains = Vec::new();
                for (g, idx) in &by_group {
                    let model = trained.domain_models.get(g).unwrap_or(&trained.model);
                    let sub = test.select(idx);
                    let out = decode_corpus(model, &sub, &opts(model))?;
                    let sub_refs: Vec<&Vec<String>> = idx.iter().map(|&i| &references[i]).collect();
                    let e = evaluate_system(&out, &sub_refs)?;
                    domains.push(DomainScore {
                        group: if g.is_empty() { "(base)".into() } else { g.clone() },
                        sentences: idx.len(),
                        ter: e.ter,
                        bleu: e.bleu,
                    });
                    for (&i, h) in idx.iter().zip(out) {
                        hyps[i] = h;
                    }
                }
                let pooled = evaluate_system(&hyps, &references)?;
                let n = domains.len() as f64;
                Evaluation {
                    ter: domains.iter().map(|d| d.ter).sum::<f64>() / n,
                    bleu: domains.iter().map(|d| d.bleu).sum::<f64>() / n,
                    sentence_edits: pooled.sentence_edits,
                    domains,
                }
            }
        };
        Ok((eval, trained.augmentation.clone()))
    }
}

/// Curriculum inputs of a system trained by the curriculum alone; `pair`
/// selects the pair of bilingual systems.
pub fn system_inputs(data: &ExperimentData, spec: &ExperimentSpec, pair: Option<&str>) -> Result<CtsInputs> {
    match spec.system {
        SystemId::BaselineApe => {
            let pair = pair.ok_or_else(|| Error::Argument("baseline-ape is trained per pair; name the pair".into()))?;
            bilingual_inputs(data, pair, spec.config.bpe_merges)
        }
        SystemId::DoNothing | SystemId::Transfer => Err(Error::Argument(format!(
            "{} is not trained by the curriculum",
            spec.system
        ))),
        _ => Ok(multilingual_inputs(data, spec)?.0),
    }
}

/// Curriculum inputs of a single pair with the joint vocabulary.
pub fn bilingual_inputs(data: &ExperimentData, pair: &str, merges: usize) -> Result<CtsInputs> {
    let p = data.pair(pair)?;
    Ok(CtsInputs {
        parallel: p.parallel_train.clone(),
        parallel_dev: p.parallel_dev.clone(),
        synthetic: p.synthetic_train.clone(),
        augmentation: None,
        synthetic_dev: p.synthetic_dev.clone(),
        authentic: p.authentic_train.clone(),
        authentic_dev: p.authentic_dev.clone(),
        vocab: Some(joint_vocab(data, merges)?),
    })
}

/// One subword vocabulary over the training text of every pair, shared by
/// all systems so that checkpoints transfer between pairs.
pub fn joint_vocab(data: &ExperimentData, merges: usize) -> Result<Vocab> {
    let all = |pick: fn(&ToyPair) -> &Corpus| {
        Corpus::new(data.pairs.iter().flat_map(|p| pick(p).triplets.iter().cloned()).collect())
    };
    let inputs = CtsInputs {
        parallel: data.pairs.iter().flat_map(|p| p.parallel_train.iter().cloned()).collect(),
        parallel_dev: Vec::new(),
        synthetic: all(|p| &p.synthetic_train),
        augmentation: None,
        synthetic_dev: Corpus::default(),
        authentic: all(|p| &p.authentic_train),
        authentic_dev: Corpus::default(),
        vocab: None,
    };
    build_vocab(&inputs, merges)
}

/// The merged, LangId-prefixed curriculum inputs of a multilingual system,
/// plus augmentation counts per direction.
pub fn multilingual_inputs(data: &ExperimentData, spec: &ExperimentSpec) -> Result<(CtsInputs, BTreeMap<String, usize>)> {
    let mode = spec.system.langid_mode();
    let langs: Vec<LangId> = data.pairs.iter().map(|p| p.target.clone()).collect();
    let merge = |pick: fn(&ToyPair) -> &Corpus, label: &str| -> Result<Corpus> {
        let parts: Vec<Corpus> = data.pairs.iter().map(|p| pick(p).clone()).collect();
        let merged = merge_multilingual(&parts, derive_seed(spec.seed, &format!("merge/{label}")))?;
        prefix_langid(&merged, mode, &langs)
    };
    let parallel = |pick: fn(&ToyPair) -> &Vec<ParallelPair>| -> Vec<ParallelPair> {
        data.pairs.iter().flat_map(|p| pick(p).iter().cloned()).collect()
    };
    let (augmentation, counts) = match spec.system.augmentation() {
        Augmentation::None => (None, BTreeMap::new()),
        kind => {
            let translator = data
                .translator
                .as_deref()
                .ok_or_else(|| Error::Translator("augmentation needs an external translator".into()))?;
            let sources: Vec<&Corpus> = data.pairs.iter().map(|p| &p.synthetic_train).collect();
            let aug = build_augmentation(&sources, translator, spec.augmentation_size, kind, spec.seed)?;
            let counts = direction_counts(&aug);
            (Some(prefix_langid(&aug, LangIdMode::All, &langs)?), counts)
        }
    };
    let inputs = CtsInputs {
        parallel: parallel(|p| &p.parallel_train),
        parallel_dev: parallel(|p| &p.parallel_dev),
        synthetic: merge(|p| &p.synthetic_train, "synthetic")?,
        augmentation,
        synthetic_dev: merge(|p| &p.synthetic_dev, "synthetic-dev")?,
        authentic: merge(|p| &p.authentic_train, "authentic")?,
        authentic_dev: merge(|p| &p.authentic_dev, "authentic-dev")?,
        vocab: Some(joint_vocab(data, spec.config.bpe_merges)?),
    };
    Ok((inputs, counts))
}

fn direction_counts(c: &Corpus) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in c.manifest().entries {
        *counts.entry(format!("{}->{}", e.source_lang, e.target_lang)).or_default() += e.count;
    }
    counts
}

/// `size` augmentation triplets drawn equally from each corpus (one per
/// target language), with the next corpus's target language as the
/// external language.
pub fn build_augmentation(
    corpora: &[&Corpus],
    translator: &dyn ExternalTranslator,
    size: usize,
    kind: Augmentation,
    seed: u64,
) -> Result<Corpus> {
    let k = corpora.len();
    if k < 2 {
        return Err(Error::Data("augmentation needs at least two target languages".into()));
    }
    if size == 0 || size % k != 0 {
        return Err(Error::Argument(format!(
            "augmentation size {size} must be a positive multiple of {k} directions"
        )));
    }
    let targets = corpora
        .iter()
        .map(|c| {
            let first = c.triplets.first().ok_or_else(|| Error::EmptyCorpus("augmentation input".into()))?;
            if c.triplets.iter().any(|t| t.target_lang != first.target_lang) {
                return Err(Error::Data("each augmentation input must have one target language".into()));
            }
            Ok(first.target_lang.clone())
        })
        .collect::<Result<Vec<LangId>>>()?;
    let per = size / k;
    let mut triplets = Vec::new();
    let mut provenance = BTreeMap::new();
    for (i, c) in corpora.iter().enumerate() {
        let external_for = BTreeMap::from([(targets[i].clone(), targets[(i + 1) % k].clone())]);
        let quads = make_quadruples(c, translator, per, &external_for, derive_seed(seed, &format!("augment/{}", targets[i])))?;
        if quads.len() != per {
            return Err(Error::Data(format!(
                "{}: built {} of {per} quadruples, directions would be unequal",
                targets[i],
                quads.len()
            )));
        }
        let c = match kind {
            Augmentation::AdditionalPairs => additional_pair_triplets(&quads)?,
            Augmentation::ExternalCandidates => external_candidate_triplets(&quads, DEFAULT_SEP)?,
            Augmentation::None => return Err(Error::Argument("no augmentation requested".into())),
        };
        provenance.extend(c.provenance.clone());
        triplets.extend(c.triplets);
    }
    let mut c = Corpus::new(triplets).with_split(Split::Train);
    c.provenance = provenance;
    c.provenance.insert("per_direction".into(), per.to_string());
    let counts = direction_counts(&c);
    if counts.values().any(|&n| n != per) {
        return Err(Error::Data(format!("unequal augmentation directions: {counts:?}")));
    }
    Ok(c)
}

/// Runs every spec on each of its pairs, then tests each row against its
/// baseline row when that row is part of the grid. Row failures are
/// recorded in the table; only I/O on `out_dir` fails the whole grid.
pub fn run_experiment_grid(specs: &[ExperimentSpec], data: &ExperimentData, out_dir: impl AsRef<Path>) -> Result<ReportTable> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut grid = Grid {
        data,
        out_dir: out_dir.to_path_buf(),
        trained: BTreeMap::new(),
    };
    let mut evals: BTreeMap<(String, String), Evaluation> = BTreeMap::new();
    let mut rows = Vec::new();
    for spec in specs {
        for pair in &spec.pairs {
            let mut row = ReportRow {
                system: spec.name.clone(),
                pair: pair.clone(),
                ter: None,
                bleu: None,
                baseline: spec.system.baseline().map(|b| b.to_string()),
                p: None,
                marker: String::new(),
                error: None,
                domains: Vec::new(),
                augmentation: BTreeMap::new(),
            };
            match grid.evaluate(spec, pair) {
                Ok((e, counts)) => {
                    row.ter = Some(e.ter);
                    row.bleu = Some(e.bleu);
                    row.domains = e.domains.clone();
                    row.augmentation = counts;
                    evals.insert((spec.name.clone(), pair.clone()), e);
                }
                Err(e) => {
                    log::error!("{} {pair}: {e}", spec.name);
                    row.error = Some(e.to_string());
                }
            }
            rows.push(row);
        }
    }
    for (row, spec) in rows.iter_mut().zip(specs.iter().flat_map(|s| s.pairs.iter().map(move |_| s))) {
        let (Some(base), Some(mine)) = (&row.baseline, evals.get(&(row.system.clone(), row.pair.clone()))) else {
            continue;
        };
        let Some(theirs) = evals.get(&(base.clone(), row.pair.clone())) else {
            continue;
        };
        let seed = derive_seed(spec.seed, &format!("significance/{}/{}", row.system, row.pair));
        match significance_test(&mine.sentence_edits, &theirs.sentence_edits, SIGNIFICANCE_TRIALS, seed) {
            Ok(s) => {
                row.p = Some(s.p_value);
                if s.p_value >= SIGNIFICANCE_LEVEL {
                    row.marker = INSIGNIFICANT.into();
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
    }
    let table = ReportTable {
        rows,
        preprocessing: preprocessing_note(),
    };
    table.save(out_dir)?;
    Ok(table)
}

/// One row per size (and pair) of `base` with that augmentation size.
/// Sizes the synthetic corpora cannot supply fail their own row only.
pub fn ablate_augmentation_size(
    sizes: &[usize],
    base: &ExperimentSpec,
    data: &ExperimentData,
    out_dir: impl AsRef<Path>,
) -> Result<ReportTable> {
    if base.system.augmentation() == Augmentation::None {
        return Err(Error::Argument(format!("{} uses no augmentation", base.system)));
    }
    let specs: Vec<ExperimentSpec> = sizes
        .iter()
        .map(|&n| ExperimentSpec {
            name: format!("{}@{n}", base.system),
            augmentation_size: n,
            ..base.clone()
        })
        .collect();
    let mut table = run_experiment_grid(&specs, data, out_dir.as_ref())?;
    for r in &mut table.rows {
        r.baseline = None;
    }
    table.save(out_dir)?;
    Ok(table)
}

/// A grid description file: data, systems, pairs, seed and configuration
/// overrides on top of a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    /// Data directory, relative to the grid file.
    pub data: PathBuf,
    pub seed: u64,
    #[serde(default = "all_systems")]
    pub systems: Vec<SystemId>,
    #[serde(default)]
    pub pairs: Vec<String>,
    #[serde(default = "default_augmentation_size")]
    pub augmentation_size: usize,
    /// `toy` or `paper`.
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub config: toml::Table,
}

fn all_systems() -> Vec<SystemId> {
    SystemId::ALL.to_vec()
}

fn default_augmentation_size() -> usize {
    200
}

fn default_profile() -> String {
    "toy".into()
}

impl GridFile {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: GridFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let data = path.parent().unwrap_or(Path::new(".")).join(&grid.data);
        Ok((grid, data))
    }

    /// The profile with the `[config]` overrides applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::profile(&self.profile)?.with_overrides(&self.config)
    }

    pub fn specs(&self, data: &ExperimentData) -> Result<Vec<ExperimentSpec>> {
        let config = self.train_config()?;
        let pairs = if self.pairs.is_empty() { data.pair_labels() } else { self.pairs.clone() };
        for p in &pairs {
            data.pair(p)?;
        }
        Ok(self
            .systems
            .iter()
            .map(|&s| ExperimentSpec::new(s, pairs.clone(), config.clone(), self.seed, self.augmentation_size))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToySizes;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 5e-3,
            warmup_steps: 10,
            patience: 1,
            max_epochs: 1,
            bpe_merges: 100,
            embed_dim: 16,
            ff_dim: 24,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            max_len: 12,
            adapter_dim: 4,
            eval_beam: 2,
            ..TrainConfig::toy()
        }
    }

    fn tiny_data() -> ExperimentData {
        let sizes = ToySizes {
            parallel_train: 16,
            parallel_dev: 4,
            synthetic_train: 16,
            synthetic_dev: 4,
            authentic_train: 12,
            authentic_dev: 4,
            authentic_test: 6,
        };
        ExperimentData::from_toy(toy::generate(3, &sizes).unwrap())
    }

    #[test]
    fn system_ids_round_trip() {
        for id in SystemId::ALL {
            assert_eq!(id.as_str().parse::<SystemId>().unwrap(), id);
            assert_eq!(serde_json::to_string(&id).unwrap(), format!("\"{id}\""));
        }
        assert!("w-langid+magic".parse::<SystemId>().is_err());
    }

    #[test]
    fn identity_scores_perfectly() {
        let refs = vec![vec!["a".to_string(), "b".to_string()]];
        let e = evaluate_system(&refs, &refs).unwrap();
        assert_eq!(e.ter, 0.0);
        assert_eq!(e.bleu, 100.0);
        assert!(evaluate_system(&refs, &[refs[0].clone(), refs[0].clone()]).is_err());
    }

    #[test]
    fn augmentation_is_balanced_and_bounded() {
        let data = tiny_data();
        let tr = data.translator.as_deref().unwrap();
        let sources: Vec<&Corpus> = data.pairs.iter().map(|p| &p.synthetic_train).collect();
        let c = build_augmentation(&sources, tr, 10, Augmentation::AdditionalPairs, 1).unwrap();
        assert_eq!(direction_counts(&c).values().copied().collect::<Vec<_>>(), [5, 5]);
        assert!(build_augmentation(&sources, tr, 9, Augmentation::AdditionalPairs, 1).is_err());
        assert!(build_augmentation(&sources, tr, 40, Augmentation::AdditionalPairs, 1).is_err());
        assert!(build_augmentation(&sources[..1], tr, 4, Augmentation::AdditionalPairs, 1).is_err());
        let c = build_augmentation(&sources, tr, 4, Augmentation::ExternalCandidates, 1).unwrap();
        assert!(c.triplets.iter().all(|t| t.translation.iter().filter(|w| *w == DEFAULT_SEP).count() == 1));
    }

    #[test]
    fn small_grid_has_complete_rows_and_markers() {
        let data = tiny_data();
        let pairs = data.pair_labels();
        let specs: Vec<ExperimentSpec> = [SystemId::DoNothing, SystemId::BaselineApe, SystemId::WLangid]
            .into_iter()
            .map(|s| ExperimentSpec::new(s, pairs.clone(), tiny_config(), 5, 8))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let table = run_experiment_grid(&specs, &data, dir.path()).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.failed(), 0);
        for r in &table.rows {
            assert!(r.ter.is_some() && r.bleu.is_some());
            assert_eq!(r.p.is_some(), r.system != "do-nothing");
            assert_eq!(r.marker == INSIGNIFICANT, r.p.is_some_and(|p| p >= SIGNIFICANCE_LEVEL));
        }
        let tsv = fs::read_to_string(dir.path().join(REPORT_TSV)).unwrap();
        assert_eq!(tsv, table.to_tsv());
        assert!(tsv.starts_with("system\tpair\tTER\tBLEU\tp\tmarker\n"));
        assert!(table.to_text().contains("Baseline APE"));
    }

    #[test]
    fn failing_rows_do_not_stop_the_grid() {
        let mut data = tiny_data();
        data.translator = None;
        let pairs = data.pair_labels();
        let specs = vec![
            ExperimentSpec::new(SystemId::DoNothing, pairs.clone(), tiny_config(), 5, 8),
            ExperimentSpec::new(SystemId::WLangidPairs, pairs.clone(), tiny_config(), 5, 8),
        ];
        let dir = tempfile::tempdir().unwrap();
        let table = run_experiment_grid(&specs, &data, dir.path()).unwrap();
        assert_eq!(table.failed(), 2);
        assert!(table.row("do-nothing", "en-hi").unwrap().ter.is_some());
        assert!(table.to_tsv().contains("w-langid+pairs\ten-hi\tNA\tNA\tNA\tfailed"));
    }

    #[test]
    fn grid_file_applies_overrides() {
        let text = r#"
            data = "toy"
            seed = 17
            systems = ["do-nothing", "w-langid"]
            [config]
            max_epochs = 7
            [config.domain_groups]
            law = "general"
        "#;
        let g: GridFile = toml::from_str(text).unwrap();
        let c = g.train_config().unwrap();
        assert_eq!(c.max_epochs, 7);
        assert_eq!(c.embed_dim, TrainConfig::toy().embed_dim);
        assert_eq!(c.domain_groups["law"], "general");
        let bad: GridFile = toml::from_str("data = \"x\"\nseed = 1\n[config]\nnope = 1\n").unwrap();
        assert!(bad.train_config().is_err());
    }
}
