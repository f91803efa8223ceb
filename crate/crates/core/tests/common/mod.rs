#![allow(dead_code)]

use std::sync::OnceLock;

use memoe::dataset::{self, Corpus, CorpusSpec, EditRecord};
use memoe::model::{ModelConfig, ModelSnapshot};
use memoe::train::{train_base_with, TrainOptions};
use memoe::Tensor;

pub struct Fixture {
    pub corpus: Corpus,
    pub snapshot: ModelSnapshot,
    /// Edit records with locality ground truth from `snapshot`.
    pub records: Vec<EditRecord>,
}

fn build(spec: CorpusSpec, model: impl Fn(usize) -> ModelConfig, opts: &TrainOptions) -> Fixture {
    let corpus = dataset::generate(&spec).unwrap();
    let config = model(corpus.vocab.len());
    let (snapshot, _) = train_base_with(&corpus.pretrain_tokens(), config, opts).unwrap();
    let records = dataset::attach_locality_ground_truth(&corpus.records, &corpus.vocab, &snapshot).unwrap();
    Fixture {
        corpus,
        snapshot,
        records,
    }
}

/// Twelve facts on a narrow two-layer model.
pub fn small() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let opts = TrainOptions {
            steps: 300,
            batch_size: 0,
            ..TrainOptions::default()
        };
        build(CorpusSpec::desk(12, 42), small_config, &opts)
    })
}

pub fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 32,
        seed: 42,
    }
}

/// The seed-42, 50-fact corpus on the default model.
pub fn desk() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build(CorpusSpec::desk(50, 42), |v| ModelConfig::desk(v, 42), &TrainOptions::default()))
}

pub fn random_tensor(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data)
}

pub fn random_vec(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}
