//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mape_core::corpus::{prefix_langid, ApeTriplet, Corpus, LangId, LangIdMode, Origin};
use mape_core::decode::{decode_corpus, do_nothing, DecodeOptions};
use mape_core::harness::{
    evaluate_system, run_experiment_grid, system_inputs, ExperimentData, ExperimentSpec, GridFile, SystemId, REPORT_JSON,
    REPORT_TEXT, REPORT_TSV,
};
use mape_core::losses::nash::{ls_combine_grads, nash_combine, TaskGradients, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use mape_core::losses::{collect_task_gradients, Reduction, Tasks};
use mape_core::metrics::{bleu, oracle_min_edits, ter, LinkKind, MoveRule, OracleLimits, ShiftClosure};
use mape_core::model::vocab::Vocab;
use mape_core::model::{load_checkpoint, save_checkpoint, ApeModel, Batch, Example, ExampleBuilder, ModelConfig, ParamRole};
use mape_core::qe::{word_tags, QeAnnotation, Tag};
use mape_core::toy;
use mape_core::trainer::{run_cts, train_domain_adapt, CtsOptions, CtsOutcome, Stage, TrainConfig, TrainLog};

// Tolerances and budgets.
const TER_SWEEP_MAX_LEN: usize = 5;
const TER_SWEEP_ALPHABET: usize = 4;
const TER_SWEEP_BUDGET: Duration = Duration::from_secs(120);
const BLEU_WORKED_EXAMPLE: f64 = 77.88;
const BLEU_TOL: f64 = 0.01;
const NASH_INSTANCES: usize = 1000;
const NASH_RESIDUAL: f64 = 1e-6;
const NASH_CLOSED_FORM_TOL: f64 = 1e-8;
const NASH_RESCALE_TOL: f64 = 1e-6;
const FD_PROBES: usize = 32;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const ADAPTER_MIN_STEPS: usize = 100;
const ADAPTER_INIT_TOL: f64 = 1e-6;
const QE_PAIRS: usize = 1000;
const CTS_BUDGET: Duration = Duration::from_secs(600);
const TOY_SEED: u64 = 17;
const MIN_TER_GAIN: f64 = 10.0;
const MIN_TARGET_ONLY: f64 = 0.95;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// 1. Greedy TER against the exhaustive block-move oracle.

fn sequences(max_len: usize, alphabet: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &layer {
            for a in 0..alphabet as u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

fn show(s: &[u8]) -> String {
    if s.is_empty() {
        return "-".into();
    }
    s.iter().map(|&c| (b'a' + c) as char).collect()
}

fn ter_sweep() -> Verdict {
    let start = Instant::now();
    let seqs = sequences(TER_SWEEP_MAX_LEN, TER_SWEEP_ALPHABET);
    let limits = OracleLimits {
        max_len: TER_SWEEP_MAX_LEN,
        max_depth: TER_SWEEP_MAX_LEN,
    };
    let mut pairs = 0usize;
    let mut classes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut examples: BTreeMap<&str, String> = BTreeMap::new();
    let mut table = String::from("hyp\tref\tgreedy\toracle\tref_matching\tref_matching_improving\tclass\n");
    for hyp in &seqs {
        let closure = ShiftClosure::new(hyp, limits).unwrap();
        for reference in seqs.iter().filter(|r| !r.is_empty()) {
            pairs += 1;
            let (_, trace) = ter(hyp, reference).unwrap();
            let greedy = trace.edits();
            let oracle = closure.min_edits(reference);
            if greedy == oracle {
                continue;
            }
            let matching = oracle_min_edits(hyp, reference, MoveRule::RefMatching, limits).unwrap();
            let improving = oracle_min_edits(hyp, reference, MoveRule::RefMatchingImproving, limits).unwrap();
            let class = if !(oracle <= matching && matching <= improving && improving <= greedy) {
                "unexplained"
            } else if oracle < matching {
                "restricted-move-set"
            } else if matching < improving {
                "non-improving-intermediate"
            } else {
                "greedy-ordering"
            };
            *classes.entry(class).or_default() += 1;
            let line = format!("{}\t{}\t{greedy}\t{oracle}\t{matching}\t{improving}\t{class}", show(hyp), show(reference));
            examples.entry(class).or_insert_with(|| line.replace('\t', " "));
            writeln!(table, "{line}").unwrap();
        }
    }
    let elapsed = start.elapsed();
    let path = scratch("ter").join("greedy_gaps.tsv");
    std::fs::write(&path, &table).unwrap();
    let mismatches: usize = classes.values().sum();
    let unexplained = classes.get("unexplained").copied().unwrap_or(0);
    let mut detail = format!(
        "{pairs} pairs, {mismatches} greedy gaps {classes:?}, {unexplained} unexplained, {:.1}s; gaps listed in {}",
        elapsed.as_secs_f64(),
        path.display()
    );
    for (class, ex) in &examples {
        write!(detail, "; e.g. {class}: {ex}").unwrap();
    }
    verdict(unexplained == 0 && elapsed < TER_SWEEP_BUDGET, detail)
}

// 2. BLEU hand checks.

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn bleu_checks() -> Verdict {
    let score = |h: &str, r: &str| bleu(&[words(h)], &[words(r)]).unwrap().score;
    let worked = score("a b c d", "a b c d e");
    let identity = score("a b c d e", "a b c d e");
    let disjoint = score("a b c d", "e f g h");
    verdict(
        (worked - BLEU_WORKED_EXAMPLE).abs() <= BLEU_TOL && identity == 100.0 && disjoint == 0.0,
        format!("worked example {worked:.4}, identity {identity}, disjoint {disjoint}"),
    )
}

// 3. Nash solver.

fn gram_residual(g: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let k = g.len();
    (0..k)
        .map(|i| {
            let lhs: f64 = (0..k)
                .map(|j| g[i].iter().zip(&g[j]).map(|(a, b)| a * b).sum::<f64>() * alpha[j])
                .sum();
            (lhs - 1.0 / alpha[i]).abs()
        })
        .fold(0.0, f64::max)
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn task_grads(grads: Vec<Vec<f64>>) -> TaskGradients {
    let names = (0..grads.len()).map(|i| format!("t{i}")).collect();
    TaskGradients::new(names, grads).unwrap()
}

fn nash_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let mut worst_residual = 0.0f64;
    let mut all_positive = true;
    let mut worst_rescale = 0.0f64;
    let mut ls_changed = 0usize;
    for _ in 0..NASH_INSTANCES {
        let k = rng.gen_range(1..=4);
        // d >= k keeps G^T G non-singular, so a positive solution exists.
        let d = rng.gen_range(k..=64);
        let g: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let (update, sol) = nash_combine(&task_grads(g.clone()), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        all_positive &= sol.alpha.iter().all(|&a| a > 0.0);
        worst_residual = worst_residual.max(gram_residual(&g, &sol.alpha));

        let scales: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..=10.0)).collect();
        let scaled: Vec<Vec<f64>> = g.iter().zip(&scales).map(|(gi, c)| gi.iter().map(|v| v * c).collect()).collect();
        let (scaled_update, _) = nash_combine(&task_grads(scaled.clone()), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        worst_rescale = worst_rescale.max(rel_diff(&scaled_update, &update));
        let ls = ls_combine_grads(&task_grads(g));
        let ls_scaled = ls_combine_grads(&task_grads(scaled));
        if rel_diff(&ls_scaled, &ls) > NASH_RESCALE_TOL {
            ls_changed += 1;
        }
    }

    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= NASH_CLOSED_FORM_TOL);
    let solve = |g: Vec<Vec<f64>>| nash_combine(&task_grads(g), DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
    let (u1, s1) = solve(vec![vec![3.0, 4.0]]);
    let (u2, s2) = solve(vec![vec![2.0, 0.0], vec![0.0, 4.0]]);
    let g = vec![1.0, 2.0, 2.0];
    let (u3, s3) = solve(vec![g.clone(), g.clone()]);
    let a3 = 1.0 / (2f64.sqrt() * 3.0);
    let e3: Vec<f64> = g.iter().map(|v| 2f64.sqrt() * v / 3.0).collect();
    let closed = [
        close(&s1.alpha, &[0.2]) && close(&u1, &[0.6, 0.8]),
        close(&s2.alpha, &[0.5, 0.25]) && close(&u2, &[1.0, 1.0]),
        close(&s3.alpha, &[a3, a3]) && close(&u3, &e3),
    ];
    // Single-task instances give LS-MTL no second gradient to rebalance,
    // but rescaling still changes its update, so every instance counts.
    verdict(
        all_positive
            && worst_residual <= NASH_RESIDUAL
            && closed.iter().all(|&c| c)
            && worst_rescale <= NASH_RESCALE_TOL
            && ls_changed == NASH_INSTANCES,
        format!(
            "{NASH_INSTANCES} instances: max residual {worst_residual:.2e}, alpha > 0: {all_positive}; closed forms {closed:?}; \
             max relative change under rescaling {worst_rescale:.2e} (LS-MTL changed in {ls_changed}/{NASH_INSTANCES})"
        ),
    )
}

// 4 and 5. Gradients of the three task losses.

fn probe_model(seed: u64, layers: usize) -> ApeModel {
    let text = "ka ki ku ke ko ma mi mu me mo ta ti tu te to na ni";
    let langs = vec![toy::HINDI.to_string(), toy::MARATHI.to_string()];
    let vocab = Vocab::train(text.split_whitespace(), 4, &langs).unwrap();
    let config = ModelConfig {
        embed_dim: 16,
        ff_dim: 24,
        heads: 2,
        encoder_layers: layers,
        decoder_layers: layers,
        adapter_dim: 8,
        max_len: 20,
        langids: langs,
        ..ModelConfig::default()
    };
    let mut m = ApeModel::new(config, vocab, seed).unwrap();
    m.add_translation_encoder(seed + 1).unwrap();
    m.add_qe_heads(seed + 2).unwrap();
    m
}

fn probe_examples(model: &ApeModel) -> Vec<Example> {
    let b = ExampleBuilder {
        vocab: &model.vocab,
        max_len: model.config.max_len,
        strict: false,
    };
    let l = |c: &str| LangId::new(c).unwrap();
    [
        ("hin_Deva ka ki mo", "ma mi mu", "ma me mu", 0.4),
        ("mar_Deva ko", "ta ti te to na ni", "ta to", 0.7),
        ("hin_Deva tu te", "na ku", "na ku ke", 0.9),
    ]
    .iter()
    .map(|(s, m, p, da)| {
        let t = ApeTriplet::new(words(s), words(m), words(p), l(toy::ENGLISH), l(toy::HINDI), "news", Origin::Authentic)
            .unwrap();
        let ann = QeAnnotation::with_da(*da, word_tags(&t.translation, &t.post_edit));
        b.triplet(&t, Some(&ann)).unwrap()
    })
    .collect()
}

const BOTH: Tasks = Tasks { ape: true, qe: true };

fn task_loss(m: &ApeModel, ex: &[Example], task: usize) -> f64 {
    let s = collect_task_gradients(m, ex, BOTH, Reduction::Mean, None).unwrap();
    [s.losses.ape, s.losses.sent, s.losses.word][task]
}

fn finite_differences() -> Verdict {
    let m = probe_model(50, 2);
    let ex = probe_examples(&m);
    let step = collect_task_gradients(&m, &ex, BOTH, Reduction::Mean, None).unwrap();
    let ids: Vec<_> = m.params.trainable_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let mut worst = (0.0f64, String::new());
    let mut nonzero = 0;
    let mut checked = 0;
    for probe in 0..FD_PROBES {
        let id = ids[rng.gen_range(0..ids.len())];
        let (rows, cols) = m.params.value(id).dim();
        let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        for (task, grads) in [&step.ape, &step.sent, &step.word].into_iter().enumerate() {
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[[r, c]]);
            let mut plus = m.clone();
            plus.params.value_mut(id)[[r, c]] += FD_STEP;
            let mut minus = m.clone();
            minus.params.value_mut(id)[[r, c]] -= FD_STEP;
            let numeric = (task_loss(&plus, &ex, task) - task_loss(&minus, &ex, task)) / (2.0 * FD_STEP);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            checked += 1;
            if analytic != 0.0 {
                nonzero += 1;
            }
            if err > worst.0 {
                worst = (err, format!("probe {probe} task {task} {}[{r},{c}]", m.params.name(id)));
            }
        }
    }
    verdict(
        worst.0 < FD_TOL,
        format!(
            "{FD_PROBES} probes x 3 losses ({checked} checks, {nonzero} non-zero), max relative error {:.2e} at {}",
            worst.0, worst.1
        ),
    )
}

fn masking() -> Verdict {
    let m = probe_model(40, 2);
    let head: Vec<_> = m.params.ids().filter(|&id| m.role(id) == ParamRole::SentHead).collect();
    let count_nonzero = |step: &mape_core::losses::TaskStep| -> usize {
        head.iter()
            .flat_map(|id| [&step.ape[id.index()], &step.sent[id.index()], &step.word[id.index()]])
            .flatten()
            .map(|g| g.iter().filter(|v| v.to_bits() != 0).count())
            .sum()
    };
    // Positive control: with DA scores present the head does receive gradient.
    let annotated = collect_task_gradients(&m, &probe_examples(&m), BOTH, Reduction::Mean, None).unwrap();
    let mut ex = probe_examples(&m);
    for e in &mut ex {
        e.da = None;
    }
    let masked = collect_task_gradients(&m, &ex, BOTH, Reduction::Mean, None).unwrap();
    let control = count_nonzero(&annotated);
    let leaked = count_nonzero(&masked);
    verdict(
        !head.is_empty() && masked.losses.sent.to_bits() == 0 && leaked == 0 && control > 0,
        format!(
            "L_sent = {}, {leaked} non-zero gradient entries on {} sentence-head tensors (control with DA: {control})",
            masked.losses.sent,
            head.len()
        ),
    )
}

// 6. Adapter discipline.

fn adapters() -> Verdict {
    let sizes = toy::ToySizes {
        parallel_train: 32,
        parallel_dev: 8,
        synthetic_train: 32,
        synthetic_dev: 8,
        authentic_train: 64,
        authentic_dev: 16,
        authentic_test: 4,
    };
    let data = toy::generate(TOY_SEED, &sizes).unwrap();
    let p = &data.pairs[0];
    let text: Vec<String> = p
        .authentic_train
        .triplets
        .iter()
        .flat_map(|t| t.source.iter().chain(&t.translation).chain(&t.post_edit).cloned())
        .collect();
    let langs = vec![toy::HINDI.to_string(), toy::MARATHI.to_string()];
    let vocab = Vocab::train(text.iter().map(String::as_str), 100, &langs).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        learning_rate: 5e-3,
        warmup_steps: 10,
        max_epochs: 25,
        patience: 25,
        embed_dim: 16,
        ff_dim: 24,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        max_len: 24,
        adapter_dim: 4,
        domain_groups: BTreeMap::new(),
        domain_default: None,
        ..TrainConfig::toy()
    };
    let mut base = ApeModel::new(config.model_config(langs.clone()), vocab, 3).unwrap();
    base.add_translation_encoder(4).unwrap();

    let dir = scratch("adapters");
    let ckpt = dir.join("base.ckpt");
    save_checkpoint(&base, &ckpt).unwrap();
    let mut log = TrainLog::default();
    let groups = train_domain_adapt(&base, &p.authentic_train, &p.authentic_dev, &config, &mut log).unwrap();
    let reference: ApeModel = load_checkpoint(&ckpt).unwrap();

    let mut min_steps = usize::MAX;
    let mut changed = Vec::new();
    let mut adapters_moved = 0;
    for (group, (model, summary)) in &groups {
        min_steps = min_steps.min(summary.steps);
        for id in model.params.ids() {
            let name = model.params.name(id);
            match reference.params.id(name) {
                Some(rid) => {
                    let same = reference
                        .params
                        .value(rid)
                        .iter()
                        .zip(model.params.value(id))
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        changed.push(format!("{group}:{name}"));
                    }
                }
                None => {
                    if model.params.value(id).iter().any(|&v| v != 0.0) {
                        adapters_moved += 1;
                    }
                }
            }
        }
    }

    // Logit change from inserting fresh adapters.
    let builder = ExampleBuilder {
        vocab: &base.vocab,
        max_len: base.config.max_len,
        strict: false,
    };
    let annotations = p.authentic_dev.annotations().unwrap();
    let ex: Vec<Example> = p
        .authentic_dev
        .triplets
        .iter()
        .zip(annotations)
        .map(|(t, a)| builder.triplet(t, Some(a)).unwrap())
        .collect();
    let batch = Batch::new(&ex);
    let before = base.forward_ape(&batch).unwrap().0;
    let mut with = base.clone();
    with.insert_adapters(config.adapter_dim, 5).unwrap();
    let after = with.forward_ape(&batch).unwrap().0;
    let max_delta = before.iter().zip(after.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    verdict(
        min_steps >= ADAPTER_MIN_STEPS && changed.is_empty() && adapters_moved > 0 && max_delta <= ADAPTER_INIT_TOL,
        format!(
            "{} groups, fewest steps {min_steps}, {} changed non-adapter tensors {:?}, {adapters_moved} adapter tensors trained; \
             max |logit change| at insertion {max_delta:.2e}",
            groups.len(),
            changed.len(),
            changed.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// 7. Word-level QE tags.

fn qe_tags() -> Verdict {
    let world = toy::ToyWorld::generate(TOY_SEED);
    let lex = world.lexicon(toy::HINDI).unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
    let mut failures = Vec::new();
    let sentence = |rng: &mut ChaCha8Rng, pool: &[String], min: usize| -> Vec<String> {
        let n = rng.gen_range(min..=12);
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
    };
    // Small pools make overlaps, repeats and reorderings common.
    for i in 0..QE_PAIRS {
        let pool = &lex[..rng.gen_range(3..=lex.len().min(12))];
        let mt = sentence(&mut rng, pool, 0);
        let pe = sentence(&mut rng, pool, 1);
        let tags = word_tags(&mt, &pe);
        if tags.len() != mt.len() {
            failures.push(format!("pair {i}: {} tags for {} tokens", tags.len(), mt.len()));
            continue;
        }
        let (_, trace) = ter(&mt, &pe).unwrap();
        for link in &trace.alignment {
            if let Some(h) = link.hyp {
                let want = if link.kind == LinkKind::Match { Tag::Ok } else { Tag::Bad };
                if tags[h] != want {
                    failures.push(format!("pair {i}: token {h} tagged {:?} on a {:?} link", tags[h], link.kind));
                }
            }
        }
        if !mt.is_empty() && word_tags(&mt, &mt).iter().any(|&t| t != Tag::Ok) {
            failures.push(format!("pair {i}: identity not all OK"));
        }
        let other: Vec<String> = pe.iter().map(|w| format!("{w}~")).collect();
        if word_tags(&mt, &other).iter().any(|&t| t != Tag::Bad) {
            failures.push(format!("pair {i}: disjoint not all BAD"));
        }
    }
    verdict(
        failures.is_empty(),
        format!("{QE_PAIRS} random pairs, {} failures {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()),
    )
}

// 8 to 10. Toy pipeline, conditioning, determinism and resume.

struct Toy {
    data: ExperimentData,
    data_dir: PathBuf,
    grid: GridFile,
    spec: ExperimentSpec,
}

fn load_toy() -> Toy {
    let (grid, data_dir) = GridFile::load(workspace().join("data/toy-grid.toml")).unwrap();
    assert_eq!(grid.seed, TOY_SEED);
    let data = ExperimentData::load(&data_dir).unwrap();
    let spec = grid
        .specs(&data)
        .unwrap()
        .into_iter()
        .find(|s| s.system == SystemId::WLangid)
        .unwrap();
    Toy {
        data,
        data_dir,
        grid,
        spec,
    }
}

struct PairOutput {
    pair: String,
    target: String,
    hyps: Vec<Vec<String>>,
    ter: f64,
    bleu: f64,
    do_nothing_ter: f64,
}

fn decode_pairs(toy: &Toy, model: &ApeModel) -> Vec<PairOutput> {
    let config = toy.spec.train_config();
    let langs: Vec<LangId> = toy.data.pairs.iter().map(|p| p.target.clone()).collect();
    let opts = DecodeOptions {
        length_penalty: config.length_penalty,
        ..DecodeOptions::for_model(model, config.eval_beam)
    };
    toy.data
        .pairs
        .iter()
        .map(|p| {
            let test: &Corpus = &p.authentic_test;
            let refs: Vec<Vec<String>> = test.triplets.iter().map(|t| t.post_edit.clone()).collect();
            let prefixed = prefix_langid(test, LangIdMode::All, &langs).unwrap();
            let hyps = decode_corpus(model, &prefixed, &opts).unwrap();
            let eval = evaluate_system(&hyps, &refs).unwrap();
            let base = evaluate_system(&do_nothing(test), &refs).unwrap();
            PairOutput {
                pair: p.label(),
                target: p.target.code().to_string(),
                hyps,
                ter: eval.ter,
                bleu: eval.bleu,
                do_nothing_ter: base.ter,
            }
        })
        .collect()
}

struct PipelineRun {
    outcome: CtsOutcome,
    outputs: Vec<PairOutput>,
}

fn pipeline(toy: &Toy, slot: &mut Option<PipelineRun>) -> Verdict {
    let inputs = system_inputs(&toy.data, &toy.spec, None).unwrap();
    let config = toy.spec.train_config();
    let start = Instant::now();
    let outcome = run_cts(
        &inputs,
        &config,
        &CtsOptions {
            out_dir: scratch("pipeline"),
            ..CtsOptions::default()
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let stages: Vec<String> = outcome.log.transitions().map(|t| t.stage.clone()).collect();
    let outputs = decode_pairs(toy, &outcome.model);
    let gains: Vec<String> = outputs
        .iter()
        .map(|o| format!("{} TER {:.2} vs do-nothing {:.2} (BLEU {:.2})", o.pair, o.ter, o.do_nothing_ter, o.bleu))
        .collect();
    let pass = outcome.finished
        && stages == ["nmt", "synthetic-phase1", "synthetic-phase2", "finetune"]
        && elapsed < CTS_BUDGET
        && outputs.iter().all(|o| o.do_nothing_ter - o.ter >= MIN_TER_GAIN);
    *slot = Some(PipelineRun { outcome, outputs });
    verdict(pass, format!("stages {stages:?} in {:.1}s; {}", elapsed.as_secs_f64(), gains.join("; ")))
}

fn conditioning(toy: &Toy, run: Option<&PipelineRun>) -> Verdict {
    let Some(run) = run else { return verdict(false, "no pipeline model") };
    let world = toy::ToyWorld::load(toy.data_dir.join("world.json")).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for o in &run.outputs {
        let lexicon: HashSet<&str> = world.lexicon(&o.target).unwrap().iter().map(String::as_str).collect();
        let clean = o.hyps.iter().filter(|h| h.iter().all(|w| lexicon.contains(w.as_str()))).count();
        let share = clean as f64 / o.hyps.len() as f64;
        pass &= share >= MIN_TARGET_ONLY;
        parts.push(format!("{}: {clean}/{} outputs target-only ({:.1}%)", o.pair, o.hyps.len(), 100.0 * share));
    }
    verdict(pass, parts.join("; "))
}

fn determinism(toy: &Toy, run: Option<&PipelineRun>) -> Verdict {
    let specs = toy.grid.specs(&toy.data).unwrap();
    let files = [REPORT_TSV, REPORT_TEXT, REPORT_JSON];
    let mut reports = Vec::new();
    let mut failed_rows = 0;
    for name in ["grid-a", "grid-b"] {
        let dir = scratch(name);
        let table = run_experiment_grid(&specs, &toy.data, &dir).unwrap();
        failed_rows += table.failed();
        reports.push(files.map(|f| std::fs::read(dir.join(f)).unwrap()));
    }
    let identical = reports[0] == reports[1];

    // Interrupt after stage 2a, resume, and compare with the uninterrupted run.
    let Some(full) = run else { return verdict(false, "no pipeline run to compare against") };
    let inputs = system_inputs(&toy.data, &toy.spec, None).unwrap();
    let config = toy.spec.train_config();
    let dir = scratch("resume");
    let opts = CtsOptions {
        out_dir: dir,
        stop_after: Some(Stage::SyntheticPhase1),
        ..CtsOptions::default()
    };
    let partial = run_cts(&inputs, &config, &opts).unwrap();
    let resumed = run_cts(
        &inputs,
        &config,
        &CtsOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    let outputs = decode_pairs(toy, &resumed.model);
    let same_metrics = outputs
        .iter()
        .zip(&full.outputs)
        .all(|(a, b)| a.ter.to_bits() == b.ter.to_bits() && a.bleu.to_bits() == b.bleu.to_bits() && a.hyps == b.hyps);
    let same_model = resumed.model.params == full.outcome.model.params;
    let same_log = resumed.log == full.outcome.log;
    verdict(
        identical && failed_rows == 0 && !partial.finished && resumed.finished && same_metrics && same_model && same_log,
        format!(
            "{} grid rows x2, reports identical: {identical}, failed rows: {failed_rows}; \
             resumed after {} stages: metrics equal {same_metrics}, parameters equal {same_model}, log equal {same_log}",
            specs.len(),
            partial.log.transitions().count()
        ),
    )
}

fn run(label: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "{} {label} [{:.1}s]: {}",
        if v.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn main() {
    // Numeric arguments select criteria (`cargo test --test acceptance -- 5 6`);
    // other arguments come from the test runner and are ignored.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut results = Vec::new();
    let mut check = |n: usize, label: &str, f: &mut dyn FnMut() -> Verdict| {
        if wanted(n) {
            results.push(run(&format!("{n} {label}"), f));
        }
    };
    check(1, "TER oracle equivalence", &mut ter_sweep);
    check(2, "BLEU hand check", &mut bleu_checks);
    check(3, "Nash solver", &mut nash_checks);
    check(4, "gradient correctness", &mut finite_differences);
    check(5, "DA masking", &mut masking);
    check(6, "adapter discipline", &mut adapters);
    check(7, "QE tags", &mut qe_tags);
    if (8..=10).any(wanted) {
        let toy = load_toy();
        let mut pipeline_run = None;
        // 9 and 10 reuse the model trained by 8.
        check(8, "end-to-end toy pipeline", &mut || pipeline(&toy, &mut pipeline_run));
        check(9, "multilingual conditioning", &mut || conditioning(&toy, pipeline_run.as_ref()));
        check(10, "determinism and resume", &mut || determinism(&toy, pipeline_run.as_ref()));
    }
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
