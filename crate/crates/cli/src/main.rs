use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mape_core::augment::{CommandTranslator, ExternalTranslator};
use mape_core::corpus::{
    build_synthetic_triplets, load_corpus_dir, load_parallel, merge_multilingual, prefix_langid, save_corpus,
    split_by_domain, tokenize, Corpus, DomainGrouping, LangId, LangIdMode, Origin,
};
use mape_core::decode::{decode_corpus, DecodeOptions};
use mape_core::harness::{
    ablate_augmentation_size, build_augmentation, run_experiment_grid, system_inputs, Augmentation, ExperimentData,
    ExperimentSpec, GridFile, ReportTable, SystemId,
};
use mape_core::metrics::{evaluate, significance_test};
use mape_core::model::load_checkpoint;
use mape_core::qe::{attach_da, normalize_corpus_da, DaNorm, DaRange};
use mape_core::toy::{self, Noise, ToySizes, ToyWorld};
use mape_core::trainer::{run_cts, CtsOptions, Stage, TrainConfig, TrainMode};

/// Exit status when the harness ran but some rows failed.
const EXIT_ROW_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "mape", version, about = "Multilingual automatic post-editing workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build synthetic triplets (source, MT(source), reference) from parallel files.
    BuildSynthetic(BuildSynthetic),
    /// Merge corpus directories with a seeded shuffle, optionally adding LangIds.
    Merge(Merge),
    /// Split a corpus directory into one directory per domain group.
    SplitDomains(SplitDomains),
    /// Build Additional-Pairs or External-Candidates augmentation triplets.
    Augment(Augment),
    /// Score hypotheses against references (TSV `metric\tvalue`).
    Evaluate(Evaluate),
    /// Paired approximate-randomization test on corpus TER.
    Significance(Significance),
    /// Attach word tags and optional DA scores to a corpus.
    AnnotateQe(AnnotateQe),
    /// Run the training curriculum for one system.
    Train(Train),
    /// Post-edit a corpus with a checkpoint.
    Decode(Decode),
    /// Run an experiment grid and print the report.
    Report(Report),
    /// Generate the toy corpora.
    MakeToy(MakeToy),
}

#[derive(Args)]
struct TranslatorArgs {
    /// External translation program, called as `PROGRAM ARGS.. FROM TO`.
    #[arg(long, conflicts_with = "toy_world")]
    translator: Option<PathBuf>,
    #[arg(long = "translator-arg", allow_hyphen_values = true)]
    translator_args: Vec<String>,
    /// Use the noisy MT of a toy world file instead of a program.
    #[arg(long)]
    toy_world: Option<PathBuf>,
    /// Label that seeds the toy MT noise.
    #[arg(long, default_value = "external")]
    toy_label: String,
}

impl TranslatorArgs {
    fn build(&self) -> Result<Box<dyn ExternalTranslator>> {
        match (&self.translator, &self.toy_world) {
            (Some(p), _) => {
                let mut t = CommandTranslator::new(p);
                t.args = self.translator_args.clone();
                Ok(Box::new(t))
            }
            (None, Some(w)) => Ok(Box::new(ToyWorld::load(w)?.mt(Noise::SYNTHETIC, &self.toy_label))),
            (None, None) => bail!("give --translator or --toy-world"),
        }
    }
}

#[derive(Args)]
struct BuildSynthetic {
    #[arg(long)]
    src: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    source_lang: String,
    #[arg(long)]
    target_lang: String,
    #[arg(long, default_value = mape_core::corpus::UNKNOWN_DOMAIN)]
    domain: String,
    #[command(flatten)]
    translator: TranslatorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Merge {
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "none")]
    langid_mode: LangIdMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitDomains {
    #[arg(long)]
    corpus: PathBuf,
    /// `domain=group`; without any, every domain is its own group.
    #[arg(long = "group")]
    groups: Vec<String>,
    /// Group for domains not listed.
    #[arg(long)]
    default: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Augment {
    /// Synthetic corpus of one target language; give one per language.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    /// `pairs` or `candidates`.
    #[arg(long)]
    mode: String,
    /// Total triplets, split equally over the directions.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    translator: TranslatorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    per_sentence: bool,
}

#[derive(Args)]
struct Significance {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = mape_core::harness::SIGNIFICANCE_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnnotateQe {
    #[arg(long)]
    corpus: PathBuf,
    /// One DA score or `NA` per line.
    #[arg(long)]
    da: Option<PathBuf>,
    #[arg(long, default_value = "identity")]
    norm: DaNorm,
    #[arg(long, default_value_t = 0.0)]
    da_min: f64,
    #[arg(long, default_value_t = 100.0)]
    da_max: f64,
    /// Output directory; the corpus is rewritten in place by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Data directory in the toy layout.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "w-langid")]
    system: SystemId,
    /// Pair of a bilingual system.
    #[arg(long)]
    pair: Option<String>,
    /// Last stage to run.
    #[arg(long, default_value = "finetune")]
    stage: Stage,
    /// Finetuning mode; defaults to the system's mode.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// TOML file of TrainConfig keys applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    augmentation_size: usize,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = mape_core::decode::DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = mape_core::decode::DEFAULT_LENGTH_PENALTY)]
    length_penalty: f64,
    /// LangId prefixing applied to the corpus before decoding.
    #[arg(long, default_value = "none")]
    langid_mode: LangIdMode,
    /// Output file; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    grid: PathBuf,
    /// Output directory; defaults to `runs/` next to the grid file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Augmentation sizes to ablate instead of running the grid.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<usize>,
    /// System whose augmentation size is ablated.
    #[arg(long, default_value = "w-langid+pairs")]
    ablate_system: SystemId,
}

#[derive(Args)]
struct MakeToy {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    parallel_train: Option<usize>,
    #[arg(long)]
    synthetic_train: Option<usize>,
    #[arg(long)]
    authentic_train: Option<usize>,
    #[arg(long)]
    authentic_test: Option<usize>,
}

fn lang(code: &str) -> Result<LangId> {
    Ok(LangId::new(code)?)
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(tokenize).collect())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn build_synthetic(a: BuildSynthetic) -> Result<()> {
    let pairs = load_parallel(&a.src, &a.reference, &lang(&a.source_lang)?, &lang(&a.target_lang)?)?;
    let translator = a.translator.build()?;
    let mut corpus = build_synthetic_triplets(&pairs, translator.as_ref())?;
    for t in &mut corpus.triplets {
        t.domain = a.domain.clone();
        t.origin = Origin::Synthetic;
    }
    let m = save_corpus(&corpus, &a.out)?;
    eprintln!("{} synthetic triplets from {} pairs", m.total, pairs.len());
    Ok(())
}

fn merge(a: Merge) -> Result<()> {
    let corpora = a.corpora.iter().map(load_corpus_dir).collect::<mape_core::Result<Vec<Corpus>>>()?;
    let merged = merge_multilingual(&corpora, a.seed)?;
    let mut langs: Vec<LangId> = merged.triplets.iter().map(|t| t.target_lang.clone()).collect();
    langs.sort();
    langs.dedup();
    let out = prefix_langid(&merged, a.langid_mode, &langs)?;
    let m = save_corpus(&out, &a.out)?;
    eprintln!("merged {} triplets", m.total);
    Ok(())
}

fn split_domains(a: SplitDomains) -> Result<()> {
    let corpus = load_corpus_dir(&a.corpus)?;
    let grouping = if a.groups.is_empty() && a.default.is_none() {
        DomainGrouping {
            groups: corpus.triplets.iter().map(|t| (t.domain.clone(), t.domain.clone())).collect(),
            default: None,
        }
    } else {
        let mut groups = BTreeMap::new();
        for g in &a.groups {
            let (d, group) = g.split_once('=').with_context(|| format!("expected domain=group, got {g:?}"))?;
            groups.insert(d.to_string(), group.to_string());
        }
        DomainGrouping {
            groups,
            default: a.default,
        }
    };
    for (group, c) in split_by_domain(&corpus, &grouping)? {
        save_corpus(&c, a.out.join(&group))?;
        eprintln!("{group}: {} triplets", c.len());
    }
    Ok(())
}

fn augment(a: Augment) -> Result<()> {
    let kind = match a.mode.as_str() {
        "pairs" => Augmentation::AdditionalPairs,
        "candidates" => Augmentation::ExternalCandidates,
        other => bail!("unknown augmentation mode {other:?} (pairs or candidates)"),
    };
    let corpora = a.corpora.iter().map(load_corpus_dir).collect::<mape_core::Result<Vec<Corpus>>>()?;
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let translator = a.translator.build()?;
    let c = build_augmentation(&refs, translator.as_ref(), a.n, kind, a.seed)?;
    let m = save_corpus(&c, &a.out)?;
    for e in &m.entries {
        eprintln!("{} -> {}: {}", e.source_lang, e.target_lang, e.count);
    }
    Ok(())
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let hyps = read_token_lines(&a.hyp)?;
    let refs = read_token_lines(&a.reference)?;
    let r = evaluate(&hyps, &refs)?;
    let mut out = format!("metric\tvalue\nTER\t{:.2}\nBLEU\t{:.2}\nsentences\t{}\n", r.ter_percent(), r.bleu, hyps.len());
    if a.per_sentence {
        for (i, t) in r.sentence_ters.iter().enumerate() {
            out.push_str(&format!("TER[{}]\t{:.4}\n", i + 1, t * 100.0));
        }
    }
    write_output(None, &out)
}

fn significance(a: Significance) -> Result<()> {
    let refs = read_token_lines(&a.reference)?;
    let ra = evaluate(&read_token_lines(&a.a)?, &refs)?;
    let rb = evaluate(&read_token_lines(&a.b)?, &refs)?;
    let s = significance_test(&ra.sentence_edits, &rb.sentence_edits, a.trials, a.seed)?;
    let out = format!(
        "metric\tvalue\nTER_a\t{:.2}\nTER_b\t{:.2}\ndelta\t{:.4}\np\t{:.4}\ntrials\t{}\n",
        ra.ter_percent(),
        rb.ter_percent(),
        s.observed_delta * 100.0,
        s.p_value,
        s.trials
    );
    write_output(None, &out)
}

fn annotate_qe(a: AnnotateQe) -> Result<()> {
    let corpus = load_corpus_dir(&a.corpus)?;
    let mut table = BTreeMap::new();
    if let Some(path) = &a.da {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line == "NA" {
                continue;
            }
            let v: f64 = line
                .parse()
                .with_context(|| format!("{}:{}: expected a score or NA", path.display(), i + 1))?;
            table.insert(i, v);
        }
        if text.lines().count() != corpus.len() {
            bail!("{} has {} lines for {} triplets", path.display(), text.lines().count(), corpus.len());
        }
    }
    let range = DaRange {
        min: a.da_min,
        max: a.da_max,
    };
    let annotated = normalize_corpus_da(&attach_da(&corpus, &table, range)?, a.norm)?;
    let out = a.out.unwrap_or(a.corpus);
    save_corpus(&annotated, &out)?;
    eprintln!("annotated {} triplets ({} with DA)", annotated.len(), table.len());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::load_over(&a.profile, path)?,
        None => TrainConfig::profile(&a.profile)?,
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let data = ExperimentData::load(&a.data)?;
    let spec = ExperimentSpec::new(a.system, data.pair_labels(), config.clone(), config.seed, a.augmentation_size);
    let inputs = system_inputs(&data, &spec, a.pair.as_deref())?;
    let mut config = spec.train_config();
    if let Some(mode) = a.mode {
        config.mode = mode;
    }
    let opts = CtsOptions {
        out_dir: a.out.clone(),
        resume: a.resume,
        stop_after: (a.stage != Stage::Finetune).then_some(a.stage),
        cache_dir: None,
    };
    let out = run_cts(&inputs, &config, &opts)?;
    for t in out.log.transitions() {
        eprintln!(
            "{}: best epoch {:?}, {} {:?}{}",
            t.stage,
            t.best_epoch,
            t.criterion,
            t.best_value,
            if t.skipped { " (skipped)" } else { "" }
        );
    }
    fs::write(a.out.join("config.toml"), config.to_toml_string()).context("writing config.toml")?;
    Ok(())
}

fn decode(a: Decode) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus_dir(&a.corpus)?;
    let langs = model.config.langids.iter().map(|l| lang(l)).collect::<Result<Vec<_>>>()?;
    let corpus = prefix_langid(&corpus, a.langid_mode, &langs)?;
    let opts = DecodeOptions {
        length_penalty: a.length_penalty,
        ..DecodeOptions::for_model(&model, a.beam)
    };
    let hyps = decode_corpus(&model, &corpus, &opts)?;
    let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
    write_output(a.out.as_deref(), &text)
}

fn report(a: Report) -> Result<ExitCode> {
    let (grid, data_dir) = GridFile::load(&a.grid)?;
    let data = ExperimentData::load(&data_dir)?;
    let out = a
        .out
        .unwrap_or_else(|| a.grid.parent().unwrap_or(Path::new(".")).join("runs"));
    let table: ReportTable = if a.ablate.is_empty() {
        run_experiment_grid(&grid.specs(&data)?, &data, &out)?
    } else {
        let base = grid
            .specs(&data)?
            .into_iter()
            .next()
            .map(|s| ExperimentSpec::new(a.ablate_system, s.pairs, s.config, s.seed, s.augmentation_size))
            .context("the grid lists no systems")?;
        ablate_augmentation_size(&a.ablate, &base, &data, &out)?
    };
    print!("{}", table.to_text());
    eprintln!("report written to {}", out.display());
    Ok(if table.failed() > 0 {
        ExitCode::from(EXIT_ROW_FAILURE)
    } else {
        ExitCode::SUCCESS
    })
}

fn make_toy(a: MakeToy) -> Result<()> {
    let d = ToySizes::default();
    let sizes = ToySizes {
        parallel_train: a.parallel_train.unwrap_or(d.parallel_train),
        synthetic_train: a.synthetic_train.unwrap_or(d.synthetic_train),
        authentic_train: a.authentic_train.unwrap_or(d.authentic_train),
        authentic_test: a.authentic_test.unwrap_or(d.authentic_test),
        ..d
    };
    let data = toy::generate(a.seed, &sizes)?;
    toy::write(&data, &a.out)?;
    eprintln!("toy corpora for {} pairs written to {}", data.pairs.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildSynthetic(a) => build_synthetic(a)?,
        Command::Merge(a) => merge(a)?,
        Command::SplitDomains(a) => split_domains(a)?,
        Command::Augment(a) => augment(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Significance(a) => significance(a)?,
        Command::AnnotateQe(a) => annotate_qe(a)?,
        Command::Train(a) => train(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Report(a) => return report(a),
        Command::MakeToy(a) => make_toy(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
