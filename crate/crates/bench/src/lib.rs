//! Shared input generators for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mape_core::harness::bilingual_inputs;
use mape_core::harness::ExperimentData;
use mape_core::model::{ApeModel, Example, ExampleBuilder};
use mape_core::toy::{self, ToySizes};
use mape_core::trainer::{init_model, TrainConfig};

/// A (hypothesis, reference) pair of `len` tokens drawn from `vocab` words,
/// where the hypothesis is the reference with about a quarter of the tokens
/// replaced and one block moved.
pub fn edited_pair(len: usize, vocab: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
    let mut hyp = reference.clone();
    for tok in hyp.iter_mut() {
        if rng.gen_bool(0.25) {
            *tok = format!("w{}", rng.gen_range(0..vocab));
        }
    }
    if len >= 4 {
        let start = rng.gen_range(0..len / 2);
        let block: Vec<String> = hyp.drain(start..start + 2).collect();
        let at = rng.gen_range(0..=hyp.len());
        hyp.splice(at..at, block);
    }
    (hyp, reference)
}

pub fn edited_corpus(sentences: usize, len: usize, seed: u64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    (0..sentences).map(|i| edited_pair(len, 50, seed + i as u64)).unzip()
}

/// `k` Gaussian task gradients of dimension `d`.
pub fn gradients(k: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn small_toy_sizes() -> ToySizes {
    ToySizes {
        parallel_train: 64,
        parallel_dev: 8,
        synthetic_train: 64,
        synthetic_dev: 8,
        authentic_train: 64,
        authentic_dev: 8,
        authentic_test: 8,
    }
}

/// An untrained toy-profile model with translation encoder and QE heads, and
/// one batch of annotated authentic examples.
pub fn toy_model_and_batch(batch: usize) -> (ApeModel, Vec<Example>) {
    let data = ExperimentData::from_toy(toy::generate(17, &small_toy_sizes()).expect("toy data"));
    let config = TrainConfig::toy();
    let label = data.pair_labels()[0].clone();
    let inputs = bilingual_inputs(&data, &label, config.bpe_merges).expect("inputs");
    let mut model = init_model(&inputs, &config).expect("model");
    model.add_translation_encoder(1).expect("encoder");
    model.add_qe_heads(2).expect("heads");
    let builder = ExampleBuilder {
        vocab: &model.vocab,
        max_len: model.config.max_len,
        strict: false,
    };
    let corpus = &inputs.authentic;
    let examples = (0..batch)
        .map(|i| {
            let i = i % corpus.len();
            let ann = corpus.annotation_or_default(i);
            builder.triplet(&corpus.triplets[i], Some(&ann)).expect("example")
        })
        .collect();
    (model, examples)
}
