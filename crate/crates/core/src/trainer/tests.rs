use super::*;
use crate::corpus::{LangId, ParallelPair};
use crate::model::params::ParamStore;
use crate::model::tape::Mat;
use crate::model::{save_checkpoint, ApeModel};
use crate::toy::{self, ToySizes};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 5e-3,
        warmup_steps: 10,
        patience: 2,
        max_epochs: 3,
        bpe_merges: 200,
        embed_dim: 16,
        ff_dim: 24,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        max_len: 12,
        adapter_dim: 4,
        ..TrainConfig::toy()
    }
}

fn tiny_inputs(seed: u64) -> CtsInputs {
    let sizes = ToySizes {
        parallel_train: 24,
        parallel_dev: 4,
        synthetic_train: 24,
        synthetic_dev: 4,
        authentic_train: 16,
        authentic_dev: 4,
        authentic_test: 4,
    };
    let data = toy::generate(seed, &sizes).unwrap();
    let p = &data.pairs[0];
    CtsInputs {
        parallel: p.parallel_train.clone(),
        parallel_dev: p.parallel_dev.clone(),
        synthetic: p.synthetic_train.clone(),
        augmentation: None,
        synthetic_dev: p.synthetic_dev.clone(),
        authentic: p.authentic_train.clone(),
        authentic_dev: p.authentic_dev.clone(),
        vocab: None,
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::default();
    let id = store.add("x", Mat::from_elem((1, 2), 3.0));
    let cfg = TrainConfig {
        learning_rate: 0.1,
        ..TrainConfig::toy()
    };
    let mut adam = Adam::new(&cfg, 1);
    for _ in 0..300 {
        let g = store.value(id).mapv(|v| 2.0 * v);
        adam.step(&mut store, &[Some(g)], 0.1);
    }
    assert!(store.value(id).iter().all(|v| v.abs() < 1e-2), "{:?}", store.value(id));
}

#[test]
fn adam_skips_frozen_and_gradient_free_parameters() {
    let mut store = ParamStore::default();
    let a = store.add("a", Mat::from_elem((1, 1), 1.0));
    let b = store.add("b", Mat::from_elem((1, 1), 1.0));
    store.set_trainable(b, false);
    let mut adam = Adam::new(&TrainConfig::toy(), 2);
    adam.step(&mut store, &[None, Some(Mat::from_elem((1, 1), 1.0))], 0.1);
    assert_eq!(store.value(a)[[0, 0]], 1.0);
    assert_eq!(store.value(b)[[0, 0]], 1.0);
}

#[test]
fn derived_seeds_differ_by_label() {
    assert_eq!(derive_seed(1, "nmt"), derive_seed(1, "nmt"));
    assert_ne!(derive_seed(1, "nmt"), derive_seed(1, "finetune"));
    assert_ne!(derive_seed(1, "nmt"), derive_seed(2, "nmt"));
}

#[test]
fn nmt_stage_learns_a_copy_task() {
    let lang = LangId::new(toy::HINDI).unwrap();
    let words = ["ka", "ki", "ku", "ke", "ko", "ma", "mi", "mu"];
    let pairs: Vec<ParallelPair> = (0..64)
        .map(|i| {
            let s: Vec<String> = (0..3).map(|j| words[(i * 3 + j * 5 + i / 8) % words.len()].to_string()).collect();
            ParallelPair::new(s.clone(), s, lang.clone(), lang.clone()).unwrap()
        })
        .collect();
    let inputs = CtsInputs {
        parallel: pairs[..56].to_vec(),
        parallel_dev: pairs[56..].to_vec(),
        ..tiny_inputs(1)
    };
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 30,
        ..tiny_config()
    };
    let mut model = init_model(&inputs, &cfg).unwrap();
    let mut log = TrainLog::default();
    let s = train_stage1_nmt(&mut model, &inputs.parallel, &inputs.parallel_dev, &cfg, &mut log).unwrap();
    let first = log.epochs().next().unwrap().criterion;
    assert!(s.best_value <= 0.5 * first, "dev loss {first} -> {}", s.best_value);
    log.validate().unwrap();
}

#[test]
fn early_stopping_respects_patience() {
    let inputs = tiny_inputs(2);
    // A learning rate this large makes dev loss stop improving quickly.
    let cfg = TrainConfig {
        learning_rate: 0.5,
        warmup_steps: 0,
        max_epochs: 40,
        patience: 2,
        ..tiny_config()
    };
    let mut model = init_model(&inputs, &cfg).unwrap();
    let mut log = TrainLog::default();
    let s = match train_stage1_nmt(&mut model, &inputs.parallel, &inputs.parallel_dev, &cfg, &mut log) {
        Ok(s) => s,
        Err(crate::Error::Diverged { .. }) => return,
        Err(e) => panic!("{e}"),
    };
    assert!(s.epochs - s.best_epoch <= cfg.patience);
    if s.epochs < cfg.max_epochs {
        assert_eq!(s.epochs - s.best_epoch, cfg.patience);
    }
    log.validate().unwrap();
}

#[test]
fn multitask_needs_annotations_and_domain_adapt_needs_its_own_entry() {
    let inputs = tiny_inputs(3);
    let cfg = tiny_config();
    let mut model = init_model(&inputs, &cfg).unwrap();
    model.add_translation_encoder(1).unwrap();
    let mut bare = inputs.authentic.clone();
    bare.set_annotations(None).unwrap();
    let mut log = TrainLog::default();
    let mtl = TrainConfig {
        mode: TrainMode::NashMtl,
        ..cfg.clone()
    };
    assert!(matches!(
        train_stage3_finetune(&mut model.clone(), &bare, &inputs.authentic_dev, &mtl, &mut log),
        Err(crate::Error::Mode(_))
    ));
    let da = TrainConfig {
        mode: TrainMode::DomainAdapt,
        ..cfg.clone()
    };
    assert!(train_stage3_finetune(&mut model.clone(), &inputs.authentic, &inputs.authentic_dev, &da, &mut log).is_err());
    // Training on an evaluation split is refused.
    assert!(train_stage3_finetune(&mut model, &inputs.authentic_dev, &inputs.authentic_dev, &cfg, &mut log).is_err());
}

#[test]
fn nash_finetune_reports_solver_diagnostics() {
    let inputs = tiny_inputs(4);
    let cfg = TrainConfig {
        mode: TrainMode::NashMtl,
        stage: Stage::Finetune,
        max_epochs: 2,
        ..tiny_config()
    };
    let mut model = init_model(&inputs, &tiny_config()).unwrap();
    model.add_translation_encoder(1).unwrap();
    let mut log = TrainLog::default();
    train_stage3_finetune(&mut model, &inputs.authentic, &inputs.authentic_dev, &cfg, &mut log).unwrap();
    let last = log.epochs().last().unwrap();
    assert!(last.dev.ape.is_finite() && last.dev.sent.is_finite() && last.dev.word.is_finite());
    let stats = log.epochs().find_map(|e| e.nash.clone()).unwrap();
    assert_eq!(stats.steps, 2);
    assert_eq!(stats.mean_alpha.len(), 3);
    assert!(model.qe_heads);
}

#[test]
fn domain_adapt_touches_only_adapters() {
    let inputs = tiny_inputs(5);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..tiny_config()
    };
    let mut base = init_model(&inputs, &cfg).unwrap();
    base.add_translation_encoder(1).unwrap();
    let mut log = TrainLog::default();
    let groups = train_domain_adapt(&base, &inputs.authentic, &inputs.authentic_dev, &cfg, &mut log).unwrap();
    assert!(groups.len() >= 2);
    for (g, (m, _)) in &groups {
        assert_eq!(m.adapter_count(), cfg.decoder_layers, "{g}");
        for id in base.params.ids() {
            let name = base.params.name(id);
            assert_eq!(base.params.value(id), m.params.value(m.params.expect(name)), "{g}: {name}");
        }
    }
    log.validate().unwrap();
}

#[test]
fn cts_runs_four_stages_and_resumes_exactly() {
    let inputs = tiny_inputs(6);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..tiny_config()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_cts(
        &inputs,
        &cfg,
        &CtsOptions {
            out_dir: full_dir.path().to_path_buf(),
            ..CtsOptions::default()
        },
    )
    .unwrap();
    assert!(full.finished);
    let stages: Vec<&str> = full.log.transitions().map(|t| t.stage.as_str()).collect();
    assert_eq!(stages, ["nmt", "synthetic-phase1", "synthetic-phase2", "finetune"]);
    full.log.validate().unwrap();
    assert_eq!(TrainLog::load(full_dir.path().join(LOG_FILE)).unwrap(), full.log);

    let dir = tempfile::tempdir().unwrap();
    let opts = CtsOptions {
        out_dir: dir.path().to_path_buf(),
        stop_after: Some(Stage::SyntheticPhase1),
        ..CtsOptions::default()
    };
    let partial = run_cts(&inputs, &cfg, &opts).unwrap();
    assert!(!partial.finished);
    assert_eq!(partial.log.transitions().count(), 2);
    let resumed = run_cts(
        &inputs,
        &cfg,
        &CtsOptions {
            resume: true,
            stop_after: None,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.log, full.log);
}

#[test]
fn transfer_starts_from_the_donor() {
    let inputs = tiny_inputs(7);
    let cfg = tiny_config();
    let mut donor = init_model(&inputs, &cfg).unwrap();
    donor.add_translation_encoder(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("donor.ckpt");
    save_checkpoint(&donor, &path).unwrap();
    let model: ApeModel = transfer_model(&path, 11).unwrap();
    assert_eq!(model.params, donor.params);
    assert!(model.metadata["transfer_from"].contains("donor.ckpt"));
    let mut log = TrainLog::default();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..cfg
    };
    transfer_init(&cfg, &path, &inputs.authentic, &inputs.authentic_dev, &mut log).unwrap();
}

#[test]
fn shared_cache_serves_other_output_directories() {
    let inputs = tiny_inputs(8);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..tiny_config()
    };
    let cache = tempfile::tempdir().unwrap();
    let first = tempfile::tempdir().unwrap();
    let opts = |dir: &std::path::Path| CtsOptions {
        out_dir: dir.to_path_buf(),
        cache_dir: Some(cache.path().to_path_buf()),
        ..CtsOptions::default()
    };
    run_cts(&inputs, &cfg, &opts(first.path())).unwrap();
    // Mark every cached segment; a second run must pick the marks up.
    let mut segments = 0;
    for entry in std::fs::read_dir(cache.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.to_string_lossy().ends_with(".log.jsonl") {
            let mut log = TrainLog::load(&path).unwrap();
            for r in &mut log.records {
                if let LogRecord::Transition(t) = r {
                    t.schedule = "from-cache".into();
                }
            }
            log.save(&path).unwrap();
            segments += 1;
        }
    }
    assert_eq!(segments, 4);
    let second = tempfile::tempdir().unwrap();
    let out = run_cts(&inputs, &cfg, &opts(second.path())).unwrap();
    assert!(out.log.transitions().all(|t| t.schedule == "from-cache"));
    assert!(second.path().join("finetune.ckpt").exists());
}

#[test]
fn log_floats_survive_a_file_round_trip() {
    let mut log = TrainLog::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    for epoch in 0..200 {
        let v: f64 = rand::Rng::gen(&mut rng);
        log.records.push(LogRecord::Epoch(EpochRecord {
            stage: "nmt".into(),
            group: None,
            epoch,
            steps: epoch,
            learning_rate: v * 1e-3,
            train: None,
            dev: crate::losses::TaskLosses {
                ape: v * 7.0,
                sent: v / 3.0,
                word: v.sqrt(),
            },
            dev_ter: Some(v / 7.0),
            criterion: v * 7.0,
            best: false,
            nash: None,
        }));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    log.save(&path).unwrap();
    assert_eq!(TrainLog::load(&path).unwrap(), log);
}
