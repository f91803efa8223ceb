//! Base-model pretraining on the fact corpus.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelConfig, ModelSnapshot, PackedBatch, ParamVars};
use crate::optim::Adam;
use crate::rng;
use crate::tape::GradTape;
use crate::tensor::Tensor;

pub const LOG_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Sequences per step; 0 trains on the full corpus every step.
    pub batch_size: usize,
    /// Final learning rate as a fraction of `lr` (linear decay).
    pub final_lr_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            batch_size: 64,
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean next-token cross-entropy before each step's update.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Means over consecutive, non-overlapping windows of `LOG_WINDOW`
    /// steps; a trailing partial window is included.
    pub fn window_means(&self) -> Vec<f64> {
        self.losses
            .chunks(LOG_WINDOW)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Next-token targets for one sequence: position `i` predicts `seq[i + 1]`.
pub fn shifted_targets(seq: &[usize]) -> Vec<Option<usize>> {
    let mut t: Vec<Option<usize>> = seq[1..].iter().map(|&x| Some(x)).collect();
    t.push(None);
    t
}

/// Mean next-token cross-entropy of `snapshot` on `corpus`.
pub fn corpus_loss(corpus: &[Vec<usize>], snapshot: &ModelSnapshot) -> Result<f64> {
    let batch = PackedBatch::new(corpus, snapshot.config())?;
    let targets: Vec<Option<usize>> = corpus.iter().flat_map(|s| shifted_targets(s)).collect();
    let mut tape = GradTape::new();
    let p = ParamVars::constants(&mut tape, snapshot);
    let logits = forward_graph(&mut tape, snapshot.config(), &p, &batch, None)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.value(loss).item().expect("scalar"))
}

pub fn train_base(corpus: &[Vec<usize>], config: ModelConfig, steps: usize, lr: f64) -> Result<ModelSnapshot> {
    let opts = TrainOptions {
        steps,
        lr,
        ..TrainOptions::default()
    };
    Ok(train_base_with(corpus, config, &opts)?.0)
}

/// Trains from the seeded initialization with Adam; minibatches are drawn
/// from the seed's `data` stream.
pub fn train_base_with(
    corpus: &[Vec<usize>],
    config: ModelConfig,
    opts: &TrainOptions,
) -> Result<(ModelSnapshot, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if corpus.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidArgument("training sequences need at least two tokens".into()));
    }
    let init = ModelSnapshot::init(config.clone())?;
    let mut log = TrainLog::default();
    if opts.steps == 0 {
        return Ok((init, log));
    }
    // Validate every sequence up front.
    PackedBatch::new(corpus, &config)?;

    let mut names = Vec::new();
    let mut params: Vec<Tensor> = Vec::new();
    for (n, t) in init.params() {
        names.push(n.to_owned());
        params.push(t.clone());
    }
    let mut adam = Adam::new(opts.lr);
    let mut rng = rng::stream(config.seed, "data");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len();

    for step in 0..opts.steps {
        let frac = step as f64 / opts.steps as f64;
        adam.lr = opts.lr * (1.0 - (1.0 - opts.final_lr_fraction) * frac);

        let batch_seqs: Vec<Vec<usize>> = if opts.batch_size == 0 || opts.batch_size >= corpus.len() {
            corpus.to_vec()
        } else {
            let mut picked = Vec::with_capacity(opts.batch_size);
            while picked.len() < opts.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(corpus[order[cursor]].clone());
                cursor += 1;
            }
            picked
        };

        let batch = PackedBatch::new(&batch_seqs, &config)?;
        let targets: Vec<Option<usize>> = batch_seqs.iter().flat_map(|s| shifted_targets(s)).collect();
        let mut tape = GradTape::new();
        let leaves: Vec<_> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let pv = ParamVars::from_pairs(names.iter().cloned().zip(leaves.iter().copied()));
        let logits = forward_graph(&mut tape, &config, &pv, &batch, None)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        log.losses.push(tape.value(loss).item().expect("scalar"));
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v)).collect();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        adam.step(&mut refs, &g);
    }

    let snapshot = ModelSnapshot::new(config, names.into_iter().zip(params).collect())?;
    Ok((snapshot, log))
}
