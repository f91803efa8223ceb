//! Small pre-norm decoder-only transformer used as the frozen base model.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Section};
use crate::error::{Error, Result};
use crate::memoe::{AdapterState, Attached, MemoeConfig, MemoeHook, RoutingContext};
use crate::rng;
use crate::tape::{GradTape, Var};
use crate::tensor::{argmax, Tensor};
use crate::vocab::EOS;

pub const TOK_EMB: &str = "tok_emb";
pub const POS_EMB: &str = "pos_emb";
pub const LN_F_GAIN: &str = "ln_f.gain";
pub const LN_F_BIAS: &str = "ln_f.bias";
pub const LM_HEAD: &str = "lm_head";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, width 64, four heads, FFN width 256, context 32.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("model dimensions must be positive");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical (sorted) order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut m = BTreeMap::new();
        m.insert(TOK_EMB.to_owned(), vec![self.vocab_size, d]);
        m.insert(POS_EMB.to_owned(), vec![self.max_seq_len, d]);
        m.insert(LN_F_GAIN.to_owned(), vec![1, d]);
        m.insert(LN_F_BIAS.to_owned(), vec![1, d]);
        m.insert(LM_HEAD.to_owned(), vec![self.vocab_size, d]);
        for l in 0..self.n_layers {
            for (n, s) in [
                ("ln1.gain", vec![1, d]),
                ("ln1.bias", vec![1, d]),
                ("attn.wq", vec![d, d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.wo", vec![d, d]),
                ("ln2.gain", vec![1, d]),
                ("ln2.bias", vec![1, d]),
                ("ffn.w_in", vec![f, d]),
                ("ffn.b_in", vec![1, f]),
                ("ffn.w_out", vec![d, f]),
                ("ffn.b_out", vec![1, d]),
            ] {
                m.insert(layer_param(l, n), s);
            }
        }
        m
    }
}

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Immutable parameter set of the base model.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    config: ModelConfig,
    params: BTreeMap<String, Arc<Tensor>>,
    fingerprint: String,
}

impl PartialEq for ModelSnapshot {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.config == other.config
    }
}

impl ModelSnapshot {
    pub fn new(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "snapshot",
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        let params: BTreeMap<String, Arc<Tensor>> =
            params.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        let fingerprint = fingerprint(&params);
        Ok(Self {
            config,
            params,
            fingerprint,
        })
    }

    /// Seeded initialization: Gaussian(0, 0.02²) weights, unit gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") || name.contains(".b_") {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.insert(name, t);
        }
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Row `id` of the token embedding table.
    pub fn token_embedding(&self, id: usize) -> Option<&[f64]> {
        let t = &self.params[TOK_EMB];
        (id < t.rows()).then(|| t.row(id))
    }

    /// The frozen FFN input projection of `layer`, the `W_0` an adapter
    /// attaches beside.
    pub fn ffn_in(&self, layer: usize) -> Option<&Tensor> {
        self.param(&layer_param(layer, "ffn.w_in"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<(&str, &Tensor)> = self.params().collect();
        checkpoint::encode(
            Section::Model,
            serde_json::to_value(&self.config)?,
            serde_json::json!({ "fingerprint": self.fingerprint }),
            &tensors,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode(bytes)?;
        if ck.section != Section::Model {
            return Err(Error::Checkpoint("expected a model section".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.config)?;
        Self::new(config, ck.tensors.into_iter().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn fingerprint(params: &BTreeMap<String, Arc<Tensor>>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Sequences packed row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// `(start_row, len)` per sequence.
    pub segments: Vec<(usize, usize)>,
    /// Sequence index of every row.
    pub row_seq: Vec<usize>,
}

impl PackedBatch {
    pub fn new(seqs: &[Vec<usize>], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("forward batch"));
        }
        let mut b = PackedBatch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            row_seq: Vec::new(),
        };
        for (s, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::EmptyInput("token sequence"));
            }
            if seq.len() > config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: config.max_seq_len,
                });
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: config.vocab_size,
                });
            }
            b.segments.push((b.tokens.len(), seq.len()));
            b.tokens.extend_from_slice(seq);
            b.positions.extend(0..seq.len());
            b.row_seq.extend(std::iter::repeat(s).take(seq.len()));
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

/// A modification of one layer's FFN pre-activation.
pub trait FfnHook {
    fn layer(&self) -> usize;

    /// `x` is the normalized FFN input, `pre` the frozen `W_0·x + b`.
    fn apply(&mut self, tape: &mut GradTape, batch: &PackedBatch, x: Var, pre: Var) -> Result<Var>;
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    pub fn constants(tape: &mut GradTape, snapshot: &ModelSnapshot) -> Self {
        Self(
            snapshot
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant_shared(Arc::clone(v))))
                .collect(),
        )
    }

    pub fn leaves(tape: &mut GradTape, snapshot: &ModelSnapshot) -> Self {
        Self(
            snapshot
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf_shared(Arc::clone(v))))
                .collect(),
        )
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Var {
        self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Records the full forward graph and returns the `[rows × vocab]` logits.
pub fn forward_graph(
    tape: &mut GradTape,
    config: &ModelConfig,
    p: &ParamVars,
    batch: &PackedBatch,
    mut hook: Option<&mut dyn FfnHook>,
) -> Result<Var> {
    let tok = tape.gather_rows(p.get(TOK_EMB), &batch.tokens)?;
    let pos = tape.gather_rows(p.get(POS_EMB), &batch.positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..config.n_layers {
        let w = |n: &str| p.get(&layer_param(l, n));
        let h = tape.layer_norm(x, w("ln1.gain"), w("ln1.bias"))?;
        let q = tape.matmul_nt(h, w("attn.wq"))?;
        let k = tape.matmul_nt(h, w("attn.wk"))?;
        let v = tape.matmul_nt(h, w("attn.wv"))?;
        let a = tape.causal_attention(q, k, v, &batch.segments, config.n_heads)?;
        let o = tape.matmul_nt(a, w("attn.wo"))?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, w("ln2.gain"), w("ln2.bias"))?;
        let pre = tape.matmul_nt(h2, w("ffn.w_in"))?;
        let mut pre = tape.add_row(pre, w("ffn.b_in"))?;
        if let Some(hk) = hook.as_deref_mut() {
            if hk.layer() == l {
                pre = hk.apply(tape, batch, h2, pre)?;
            }
        }
        let act = tape.gelu(pre);
        let f = tape.matmul_nt(act, w("ffn.w_out"))?;
        let f = tape.add_row(f, w("ffn.b_out"))?;
        x = tape.add(x, f)?;
    }
    let xf = tape.layer_norm(x, p.get(LN_F_GAIN), p.get(LN_F_BIAS))?;
    tape.matmul_nt(xf, p.get(LM_HEAD))
}

/// Logits `[len × vocab]` for one sequence, with an optional adapter
/// (evaluation mode: no gate noise).
pub fn forward(tokens: &[usize], snapshot: &ModelSnapshot, adapter: Option<Attached<'_>>) -> Result<Tensor> {
    let seqs = [tokens.to_vec()];
    let mut out = match adapter {
        Some(a) => forward_batch(&seqs, snapshot, Some((a.state, a.config)), std::slice::from_ref(a.context))?,
        None => forward_batch(&seqs, snapshot, None, &[])?,
    };
    Ok(out.pop().expect("one sequence"))
}

/// Evaluation-mode logits for several sequences; `contexts` holds one
/// routing context per sequence when an adapter is attached.
pub fn forward_batch(
    seqs: &[Vec<usize>],
    snapshot: &ModelSnapshot,
    adapter: Option<(&AdapterState, &MemoeConfig)>,
    contexts: &[RoutingContext],
) -> Result<Vec<Tensor>> {
    let cfg = snapshot.config();
    let batch = PackedBatch::new(seqs, cfg)?;
    let mut tape = GradTape::new();
    let p = ParamVars::constants(&mut tape, snapshot);
    let logits = match adapter {
        Some((state, mc)) => {
            let mut hook = MemoeHook::constants(&mut tape, state, mc, contexts, None)?;
            forward_graph(&mut tape, cfg, &p, &batch, Some(&mut hook))?
        }
        None => forward_graph(&mut tape, cfg, &p, &batch, None)?,
    };
    let lt = tape.value(logits);
    Ok(batch
        .segments
        .iter()
        .map(|&(s, n)| Tensor::matrix(n, lt.cols(), lt.data()[s * lt.cols()..(s + n) * lt.cols()].to_vec()))
        .collect())
}

/// Appends argmax tokens until `max_new`, `<eos>` (not included) or the
/// context limit.
pub fn greedy_decode(
    prompt: &[usize],
    snapshot: &ModelSnapshot,
    adapter: Option<Attached<'_>>,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("decode prompt"));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        if seq.len() > snapshot.config().max_seq_len {
            break;
        }
        let logits = forward(&seq, snapshot, adapter)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
