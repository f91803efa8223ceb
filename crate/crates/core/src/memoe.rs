//! Mixture-of-experts bypass adapter for one FFN layer.
//!
//! For every token representation `x` at the target layer the adapter
//! computes
//!
//! ```text
//! G   = top_k(softmax(W_g · R(x) + ε))
//! h   = W_0 · x + λ · Σ_e G_e · W_e · x
//! ```
//!
//! where `R` is the routing strategy (token, sentence or anchor features),
//! `ε` is Gaussian noise in training mode only, and `top_k` zeroes all but
//! the `k` largest gate values without renormalizing. Only `W_g` and the
//! expert matrices `W_e` are trainable; `W_0` stays frozen.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Section};
use crate::error::{Error, Result};
use crate::model::{forward_graph, FfnHook, ModelConfig, ModelSnapshot, PackedBatch, ParamVars};
use crate::optim::Optimizer;
use crate::rng::{self, Rng};
use crate::tape::{GradTape, Var};
use crate::tensor::{argmax, matvec, softmax, top_k_indices, Tensor};

const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingStrategy {
    /// `R(x) = x`
    Token,
    /// `R(x) = concat(x, mean token embedding of the input)`
    Sentence,
    /// `R(x) = concat(x, anchor embedding)`
    Anchor,
}

impl RoutingStrategy {
    pub const ALL: [RoutingStrategy; 3] = [Self::Token, Self::Sentence, Self::Anchor];

    pub fn feature_dim(self, d_model: usize) -> usize {
        match self {
            Self::Token => d_model,
            Self::Sentence | Self::Anchor => 2 * d_model,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Token => "token",
            Self::Sentence => "sentence",
            Self::Anchor => "anchor",
        }
    }
}

impl fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "token" => Ok(Self::Token),
            "sentence" => Ok(Self::Sentence),
            "anchor" => Ok(Self::Anchor),
            other => Err(Error::Config(format!(
                "unknown routing strategy `{other}` (expected token, sentence or anchor)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub target_layer: usize,
    pub lambda: f64,
    pub noise_scale: f64,
    pub aux_weight: f64,
    pub routing: RoutingStrategy,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MemoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 1,
            target_layer: 1,
            lambda: 1.0,
            noise_scale: 0.01,
            aux_weight: 0.01,
            routing: RoutingStrategy::Anchor,
            lr: 2e-4,
            seed: 42,
        }
    }
}

const KV_FIELDS: [&str; 9] = [
    "num_experts",
    "top_k",
    "target_layer",
    "lambda",
    "noise_scale",
    "aux_weight",
    "routing",
    "lr",
    "seed",
];

impl MemoeConfig {
    /// Soft routing: every expert participates with its softmax weight.
    pub fn is_soft(&self) -> bool {
        self.top_k == self.num_experts
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k={} must satisfy 1 <= top_k <= num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("noise_scale", self.noise_scale),
            ("aux_weight", self.aux_weight),
            ("lr", self.lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Checks the config against the base model it will attach to.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.target_layer < 1 || self.target_layer >= model.n_layers {
            return Err(Error::Config(format!(
                "target_layer={} must satisfy 1 <= target_layer < n_layers={}",
                self.target_layer, model.n_layers
            )));
        }
        Ok(())
    }

    /// Flat `key=value` text, one field per line, in declaration order.
    pub fn to_kv_string(&self) -> String {
        let values = [
            self.num_experts.to_string(),
            self.top_k.to_string(),
            self.target_layer.to_string(),
            fmt_f64(self.lambda),
            fmt_f64(self.noise_scale),
            fmt_f64(self.aux_weight),
            self.routing.to_string(),
            fmt_f64(self.lr),
            self.seed.to_string(),
        ];
        KV_FIELDS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses the `key=value` form. Every field is required; `#` starts a
    /// comment line.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut seen: std::collections::HashMap<&str, (usize, &str)> = Default::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let k = k.trim();
            if !KV_FIELDS.contains(&k) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown field `{k}`"),
                });
            }
            seen.insert(k, (i + 1, v.trim()));
        }
        let get = |k: &str| -> Result<(usize, &str)> {
            seen.get(k).copied().ok_or_else(|| Error::MissingField {
                line: 0,
                field: k.to_owned(),
            })
        };
        fn num<T: FromStr>(field: &str, (line, v): (usize, &str)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid value `{v}` for `{field}`"),
            })
        }
        let cfg = Self {
            num_experts: num("num_experts", get("num_experts")?)?,
            top_k: num("top_k", get("top_k")?)?,
            target_layer: num("target_layer", get("target_layer")?)?,
            lambda: num("lambda", get("lambda")?)?,
            noise_scale: num("noise_scale", get("noise_scale")?)?,
            aux_weight: num("aux_weight", get("aux_weight")?)?,
            routing: get("routing")?.1.parse()?,
            lr: num("lr", get("lr")?)?,
            seed: num("seed", get("seed")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Per-sequence inputs to the routing feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingContext {
    /// Mean token embedding of the input sequence.
    pub sentence: Vec<f64>,
    /// Pooled knowledge-anchor embedding, if any anchor was found.
    pub anchor: Option<Vec<f64>>,
}

impl RoutingContext {
    /// Builds a context from the input tokens, looking up embeddings in the
    /// frozen base model.
    pub fn from_tokens(tokens: &[usize], snapshot: &ModelSnapshot, anchor: Option<Vec<f64>>) -> Result<Self> {
        let d = snapshot.config().d_model;
        let mut sentence = vec![0.0; d];
        for &t in tokens {
            let e = snapshot.token_embedding(t).ok_or(Error::TokenOutOfRange {
                token: t,
                vocab: snapshot.config().vocab_size,
            })?;
            for (s, v) in sentence.iter_mut().zip(e) {
                *s += v;
            }
        }
        if !tokens.is_empty() {
            sentence.iter_mut().for_each(|s| *s /= tokens.len() as f64);
        }
        Ok(Self { sentence, anchor })
    }

    /// The part concatenated after `x`, or `None` for token routing.
    fn extra(&self, strategy: RoutingStrategy) -> Option<Vec<f64>> {
        match strategy {
            RoutingStrategy::Token => None,
            RoutingStrategy::Sentence => Some(self.sentence.clone()),
            RoutingStrategy::Anchor => Some(
                self.anchor
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.sentence.len()]),
            ),
        }
    }
}

/// Routing features `R(x)` for one token.
pub fn route_features(x: &[f64], context: &RoutingContext, strategy: RoutingStrategy) -> Vec<f64> {
    let mut out = x.to_vec();
    if let Some(extra) = context.extra(strategy) {
        out.extend(extra);
    }
    out
}

/// Trainable adapter parameters: the router and one matrix per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    /// `[E × feature_dim]`
    pub router: Tensor,
    /// `E` matrices shaped like `W_0` (`[d_ff × d_model]`).
    pub experts: Vec<Tensor>,
    pub step_count: u64,
}

impl AdapterState {
    /// Router weights Gaussian(0, 0.02²) from the seed's `adapter-init`
    /// stream; expert weights zero, so the fresh adapter is a no-op.
    pub fn init(config: &MemoeConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let fdim = config.routing.feature_dim(model.d_model);
        let mut rng = rng::stream(config.seed, "adapter-init");
        let normal = Normal::new(0.0, ROUTER_INIT_STD).expect("valid std");
        let router = Tensor::matrix(
            config.num_experts,
            fdim,
            (0..config.num_experts * fdim).map(|_| normal.sample(&mut rng)).collect(),
        );
        let experts = (0..config.num_experts)
            .map(|_| Tensor::zeros(&[model.d_ff, model.d_model]))
            .collect();
        Ok(Self {
            router,
            experts,
            step_count: 0,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.router.cols()
    }

    /// Checks shapes against the base layer and routing strategy.
    pub fn validate(&self, config: &MemoeConfig, model: &ModelConfig) -> Result<()> {
        let fdim = config.routing.feature_dim(model.d_model);
        if self.router.shape() != [config.num_experts, fdim] {
            return Err(Error::ShapeMismatch {
                op: "adapter router",
                left: vec![config.num_experts, fdim],
                right: self.router.shape().to_vec(),
            });
        }
        if self.experts.len() != config.num_experts {
            return Err(Error::Config(format!(
                "adapter has {} experts, config expects {}",
                self.experts.len(),
                config.num_experts
            )));
        }
        for e in &self.experts {
            if e.shape() != [model.d_ff, model.d_model] {
                return Err(Error::ShapeMismatch {
                    op: "adapter expert",
                    left: vec![model.d_ff, model.d_model],
                    right: e.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Raw parameter bytes; equal bytes mean identical adapters.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = self.router.to_le_bytes();
        for e in &self.experts {
            out.extend(e.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self, config: &MemoeConfig) -> Result<Vec<u8>> {
        let names: Vec<String> = (0..self.experts.len()).map(|e| format!("experts.{e}")).collect();
        let mut tensors: Vec<(&str, &Tensor)> = vec![("router", &self.router)];
        tensors.extend(names.iter().map(String::as_str).zip(self.experts.iter()));
        checkpoint::encode(
            Section::Adapter,
            serde_json::to_value(config)?,
            serde_json::json!({ "step_count": self.step_count }),
            &tensors,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, MemoeConfig)> {
        let ck = checkpoint::decode(bytes)?;
        if ck.section != Section::Adapter {
            return Err(Error::Checkpoint("expected an adapter section".into()));
        }
        let config: MemoeConfig = serde_json::from_value(ck.config)?;
        let step_count = ck.meta.get("step_count").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut tensors = ck.tensors.into_iter();
        let router = match tensors.next() {
            Some((n, t)) if n == "router" => t,
            _ => return Err(Error::Checkpoint("adapter checkpoint must start with `router`".into())),
        };
        let mut experts = Vec::new();
        for (i, (n, t)) in tensors.enumerate() {
            if n != format!("experts.{i}") {
                return Err(Error::Checkpoint(format!("unexpected adapter tensor `{n}`")));
            }
            experts.push(t);
        }
        Ok((
            Self {
                router,
                experts,
                step_count,
            },
            config,
        ))
    }

    pub fn save(&self, config: &MemoeConfig, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, MemoeConfig)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// An adapter attached to a forward pass over one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Attached<'a> {
    pub state: &'a AdapterState,
    pub config: &'a MemoeConfig,
    pub context: &'a RoutingContext,
}

/// Gate noise source: none in evaluation, a seeded stream in training.
#[derive(Debug)]
pub enum GateMode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Length-`E` gate vector with at most `k` nonzeros.
    pub gate: Vec<f64>,
    /// Indices of the surviving experts, ascending.
    pub selected: Vec<usize>,
    /// Full (pre-mask) softmax output.
    pub probs: Vec<f64>,
}

impl GateDecision {
    fn from_probs(probs: Vec<f64>, k: usize) -> Result<Self> {
        let selected = top_k_indices(&probs, k)?;
        let mut gate = vec![0.0; probs.len()];
        for &i in &selected {
            gate[i] = probs[i];
        }
        Ok(Self { gate, selected, probs })
    }

    /// Expert with the largest gate value, lowest index on ties.
    pub fn top1(&self) -> usize {
        argmax(&self.probs)
    }
}

/// `top_k(softmax(W_g · features + ε))` for one token.
pub fn gate(
    features: &[f64],
    adapter: &AdapterState,
    config: &MemoeConfig,
    mode: GateMode<'_>,
) -> Result<GateDecision> {
    let mut logits = matvec(&adapter.router, features)?;
    if let GateMode::Train(rng) = mode {
        add_noise(&mut logits, config.noise_scale, rng);
    }
    GateDecision::from_probs(softmax(&logits)?, config.top_k)
}

fn add_noise(logits: &mut [f64], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for l in logits.iter_mut() {
            *l += normal.sample(rng);
        }
    }
}

/// `Σ_e G_e · W_e · x`, evaluating only experts with a nonzero gate, in
/// ascending expert order.
pub fn experts_apply(x: &[f64], g: &GateDecision, adapter: &AdapterState) -> Result<Vec<f64>> {
    if g.gate.len() != adapter.num_experts() {
        return Err(Error::ShapeMismatch {
            op: "experts_apply",
            left: vec![adapter.num_experts()],
            right: vec![g.gate.len()],
        });
    }
    let rows = adapter.experts.first().map_or(0, Tensor::rows);
    let mut out = vec![0.0; rows];
    for (e, &w) in g.gate.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let y = matvec(&adapter.experts[e], x)?;
        for (o, v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `W_0 · x + λ · Σ_e G_e · W_e · x`.
pub fn memoe_forward(
    x: &[f64],
    base: &Tensor,
    adapter: &AdapterState,
    g: &GateDecision,
    lambda: f64,
) -> Result<Vec<f64>> {
    let mut h = matvec(base, x)?;
    let bypass = experts_apply(x, g, adapter)?;
    if bypass.len() != h.len() {
        return Err(Error::ShapeMismatch {
            op: "memoe_forward",
            left: vec![h.len()],
            right: vec![bypass.len()],
        });
    }
    for (o, b) in h.iter_mut().zip(bypass) {
        *o += lambda * b;
    }
    Ok(h)
}

/// Switch-style balance loss `α · E · Σ_e f_e · P_e`, where `f_e` is the
/// fraction of tokens whose top-1 expert is `e` and `P_e` the mean pre-mask
/// probability assigned to `e`.
pub fn load_balance_loss(batch: &[GateDecision], alpha: f64, num_experts: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("load_balance_loss batch"));
    }
    let n = batch.len() as f64;
    let mut f = vec![0.0; num_experts];
    let mut p = vec![0.0; num_experts];
    for g in batch {
        if g.probs.len() != num_experts {
            return Err(Error::ShapeMismatch {
                op: "load_balance_loss",
                left: vec![num_experts],
                right: vec![g.probs.len()],
            });
        }
        f[g.top1()] += 1.0 / n;
        for (pe, v) in p.iter_mut().zip(&g.probs) {
            *pe += v / n;
        }
    }
    Ok(alpha * num_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

/// Gate outputs recorded while the adapter ran inside a forward graph.
#[derive(Clone, Debug)]
pub struct GateRecord {
    /// `[rows × E]` pre-mask softmax probabilities.
    pub probs: Var,
    /// Surviving experts per row.
    pub selected: Vec<Vec<usize>>,
    /// Top-1 expert per row.
    pub top1: Vec<usize>,
}

/// The adapter as an [`FfnHook`] on a gradient tape.
pub struct MemoeHook<'a> {
    config: &'a MemoeConfig,
    router: Var,
    experts: Vec<Var>,
    contexts: &'a [RoutingContext],
    noise: Option<&'a mut Rng>,
    pub record: Option<GateRecord>,
}

impl<'a> MemoeHook<'a> {
    /// Binds adapter parameters already registered on the tape.
    pub fn new(
        config: &'a MemoeConfig,
        router: Var,
        experts: Vec<Var>,
        contexts: &'a [RoutingContext],
        noise: Option<&'a mut Rng>,
    ) -> Self {
        Self {
            config,
            router,
            experts,
            contexts,
            noise,
            record: None,
        }
    }

    /// Registers the adapter as frozen constants (evaluation).
    pub fn constants(
        tape: &mut GradTape,
        state: &AdapterState,
        config: &'a MemoeConfig,
        contexts: &'a [RoutingContext],
        noise: Option<&'a mut Rng>,
    ) -> Result<Self> {
        config.validate()?;
        if state.num_experts() != config.num_experts {
            return Err(Error::Config("adapter expert count disagrees with config".into()));
        }
        let router = tape.constant(state.router.clone());
        let experts = state.experts.iter().map(|e| tape.constant(e.clone())).collect();
        Ok(Self::new(config, router, experts, contexts, noise))
    }
}

impl FfnHook for MemoeHook<'_> {
    fn layer(&self) -> usize {
        self.config.target_layer
    }

    fn apply(&mut self, tape: &mut GradTape, batch: &PackedBatch, x: Var, pre: Var) -> Result<Var> {
        let rows = batch.rows();
        let d = tape.value(x).cols();
        let e_count = self.config.num_experts;

        let features = match self.config.routing {
            RoutingStrategy::Token => x,
            strategy => {
                if self.contexts.len() != batch.segments.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} routing contexts for {} sequences",
                        self.contexts.len(),
                        batch.segments.len()
                    )));
                }
                let mut extra = Vec::with_capacity(rows * d);
                for &s in &batch.row_seq {
                    let v = self.contexts[s].extra(strategy).expect("non-token strategy");
                    if v.len() != d {
                        return Err(Error::ShapeMismatch {
                            op: "routing context",
                            left: vec![d],
                            right: vec![v.len()],
                        });
                    }
                    extra.extend(v);
                }
                let extra = tape.constant(Tensor::matrix(rows, d, extra));
                tape.concat_cols(x, extra)?
            }
        };

        let mut logits = tape.matmul_nt(features, self.router)?;
        if let Some(rng) = self.noise.as_deref_mut() {
            if self.config.noise_scale > 0.0 {
                let mut eps = Tensor::zeros(&[rows, e_count]);
                add_noise(eps.data_mut(), self.config.noise_scale, rng);
                let eps = tape.constant(eps);
                logits = tape.add(logits, eps)?;
            }
        }
        let probs = tape.softmax_rows(logits);

        let pv = tape.value(probs).clone();
        let mut mask = Tensor::zeros(&[rows, e_count]);
        let mut selected = Vec::with_capacity(rows);
        let mut top1 = Vec::with_capacity(rows);
        let mut rows_for: Vec<Vec<usize>> = vec![Vec::new(); e_count];
        for r in 0..rows {
            let sel = top_k_indices(pv.row(r), self.config.top_k)?;
            for &e in &sel {
                mask.row_mut(r)[e] = 1.0;
                rows_for[e].push(r);
            }
            top1.push(argmax(pv.row(r)));
            selected.push(sel);
        }
        let mask = tape.constant(mask);
        let gate = tape.mul(probs, mask)?;

        let mut mixed: Option<Var> = None;
        for (e, idx) in rows_for.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(x, idx)?;
            let ye = tape.matmul_nt(xe, self.experts[e])?;
            let col = tape.slice_cols(gate, e, e + 1)?;
            let ge = tape.gather_rows(col, idx)?;
            let ye = tape.mul_col(ye, ge)?;
            let placed = tape.scatter_rows(ye, idx, rows)?;
            mixed = Some(match mixed {
                Some(m) => tape.add(m, placed)?,
                None => placed,
            });
        }
        self.record = Some(GateRecord {
            probs,
            selected,
            top1,
        });
        match mixed {
            Some(m) => {
                let scaled = tape.scale(m, self.config.lambda);
                tape.add(pre, scaled)
            }
            None => Ok(pre),
        }
    }
}

/// Balance loss over every routed row of a recorded forward pass.
pub fn load_balance_loss_on_tape(tape: &mut GradTape, record: &GateRecord, alpha: f64, num_experts: usize) -> Result<Var> {
    let rows = record.top1.len();
    if rows == 0 {
        return Err(Error::EmptyInput("load_balance_loss batch"));
    }
    let mut f = vec![0.0; num_experts];
    for &e in &record.top1 {
        f[e] += 1.0 / rows as f64;
    }
    let f = tape.constant(Tensor::row_vector(f));
    let p = tape.col_mean(record.probs);
    let fp = tape.mul(p, f)?;
    let s = tape.sum(fp);
    Ok(tape.scale(s, alpha * num_experts as f64))
}

/// Evaluation-mode top-1 expert for every token of each sequence.
pub fn route_top1(
    seqs: &[Vec<usize>],
    snapshot: &ModelSnapshot,
    state: &AdapterState,
    config: &MemoeConfig,
    contexts: &[RoutingContext],
) -> Result<Vec<Vec<usize>>> {
    let batch = PackedBatch::new(seqs, snapshot.config())?;
    let mut tape = GradTape::new();
    let p = ParamVars::constants(&mut tape, snapshot);
    let mut hook = MemoeHook::constants(&mut tape, state, config, contexts, None)?;
    forward_graph(&mut tape, snapshot.config(), &p, &batch, Some(&mut hook))?;
    let record = hook.record.expect("hook ran at the target layer");
    Ok(batch
        .segments
        .iter()
        .map(|&(s, n)| record.top1[s..s + n].to_vec())
        .collect())
}

/// One teacher-forced edit example: the prompt followed by all but the last
/// target token, with loss only on the positions that predict the target.
#[derive(Clone, Debug, PartialEq)]
pub struct EditExample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub context: RoutingContext,
}

impl EditExample {
    pub fn new(prompt: &[usize], target: &[usize], context: RoutingContext) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("edit prompt"));
        }
        if target.is_empty() {
            return Err(Error::EmptyInput("edit target"));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&target[..target.len() - 1]);
        let mut targets = vec![None; prompt.len() - 1];
        targets.extend(target.iter().map(|&t| Some(t)));
        Ok(Self {
            tokens,
            targets,
            context,
        })
    }
}

/// Losses reported by one edit step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLosses {
    pub task: f64,
    pub aux: f64,
}

impl EditLosses {
    pub fn total(&self) -> f64 {
        self.task + self.aux
    }
}

/// Vars of a recorded edit objective.
#[derive(Clone, Copy, Debug)]
pub struct EditObjective {
    pub total: Var,
    pub task: Var,
    pub aux: Var,
}

/// Records teacher-forced target cross-entropy plus the balance loss with
/// the adapter bound to `router` and `experts`.
pub fn edit_objective(
    tape: &mut GradTape,
    snapshot: &ModelSnapshot,
    router: Var,
    experts: Vec<Var>,
    examples: &[EditExample],
    config: &MemoeConfig,
    noise: Option<&mut Rng>,
) -> Result<EditObjective> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("edit batch"));
    }
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let contexts: Vec<RoutingContext> = examples.iter().map(|e| e.context.clone()).collect();
    let targets: Vec<Option<usize>> = examples.iter().flat_map(|e| e.targets.iter().copied()).collect();
    let batch = PackedBatch::new(&seqs, snapshot.config())?;
    let p = ParamVars::constants(tape, snapshot);
    let mut hook = MemoeHook::new(config, router, experts, &contexts, noise);
    let logits = forward_graph(tape, snapshot.config(), &p, &batch, Some(&mut hook))?;
    let record = hook.record.take().expect("hook ran at the target layer");
    let task = tape.cross_entropy(logits, &targets)?;
    let aux = load_balance_loss_on_tape(tape, &record, config.aux_weight, config.num_experts)?;
    let total = tape.add(task, aux)?;
    Ok(EditObjective { total, task, aux })
}

/// One gradient step on the adapter. The base snapshot is only read.
pub fn edit_step(
    examples: &[EditExample],
    snapshot: &ModelSnapshot,
    adapter: &mut AdapterState,
    config: &MemoeConfig,
    optimizer: &mut Optimizer,
    noise: &mut Rng,
) -> Result<EditLosses> {
    adapter.validate(config, snapshot.config())?;
    let mut tape = GradTape::new();
    let router = tape.leaf(adapter.router.clone());
    let experts: Vec<Var> = adapter.experts.iter().map(|e| tape.leaf(e.clone())).collect();
    let obj = edit_objective(&mut tape, snapshot, router, experts.clone(), examples, config, Some(noise))?;
    let losses = EditLosses {
        task: tape.value(obj.task).item().expect("scalar"),
        aux: tape.value(obj.aux).item().expect("scalar"),
    };
    let grads = tape.backward(obj.total)?;
    let mut g = vec![grads.wrt(router)];
    g.extend(experts.iter().map(|&e| grads.wrt(e)));
    let mut params: Vec<&mut Tensor> = std::iter::once(&mut adapter.router)
        .chain(adapter.experts.iter_mut())
        .collect();
    optimizer.step(&mut params, &g);
    adapter.step_count += 1;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adapter(router: Tensor, experts: Vec<Tensor>) -> AdapterState {
        AdapterState {
            router,
            experts,
            step_count: 0,
        }
    }

    fn dense_sum(x: &[f64], g: &GateDecision, a: &AdapterState) -> Vec<f64> {
        let mut out = vec![0.0; a.experts[0].rows()];
        for (e, w) in a.experts.iter().enumerate() {
            for i in 0..w.rows() {
                let mut acc = 0.0;
                for j in 0..w.cols() {
                    acc += w.get(i, j) * x[j];
                }
                out[i] += g.gate[e] * acc;
            }
        }
        out
    }

    fn decision(gate: Vec<f64>) -> GateDecision {
        let selected = gate.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        GateDecision {
            probs: gate.clone(),
            gate,
            selected,
        }
    }

    #[test]
    fn route_features_by_strategy() {
        let ctx = RoutingContext {
            sentence: vec![2.0, 2.0, 2.0],
            anchor: Some(vec![9.0, 8.0, 7.0]),
        };
        let x = [1.0, 2.0, 3.0];
        assert_eq!(route_features(&x, &ctx, RoutingStrategy::Token), x.to_vec());
        assert_eq!(route_features(&x, &ctx, RoutingStrategy::Anchor).len(), 6);
        assert_eq!(
            route_features(&x, &ctx, RoutingStrategy::Sentence),
            vec![1.0, 2.0, 3.0, 2.0, 2.0, 2.0]
        );
        let none = RoutingContext {
            sentence: vec![0.0; 3],
            anchor: None,
        };
        assert_eq!(
            route_features(&x, &none, RoutingStrategy::Anchor),
            vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn sentence_context_is_mean_embedding() {
        let snap = ModelSnapshot::init(ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 8,
            seed: 1,
        })
        .unwrap();
        let ctx = RoutingContext::from_tokens(&[3, 4, 5], &snap, None).unwrap();
        let (e1, e2, e3) = (
            snap.token_embedding(3).unwrap(),
            snap.token_embedding(4).unwrap(),
            snap.token_embedding(5).unwrap(),
        );
        for j in 0..4 {
            let oracle = (e1[j] + e2[j] + e3[j]) / 3.0;
            assert!((ctx.sentence[j] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_gate_with_zero_router() {
        let cfg = MemoeConfig {
            top_k: 4,
            noise_scale: 0.0,
            ..MemoeConfig::default()
        };
        let a = adapter(Tensor::zeros(&[4, 3]), vec![Tensor::zeros(&[2, 3]); 4]);
        let g = gate(&[0.3, -1.0, 2.0], &a, &cfg, GateMode::Eval).unwrap();
        assert_eq!(g.gate, vec![0.25; 4]);
    }

    #[test]
    fn top1_gate_keeps_softmax_value() {
        let cfg = MemoeConfig {
            num_experts: 2,
            top_k: 1,
            ..MemoeConfig::default()
        };
        // Router maps the feature [1] to logits [1, 0].
        let a = adapter(Tensor::matrix(2, 1, vec![1.0, 0.0]), vec![Tensor::zeros(&[1, 1]); 2]);
        let g = gate(&[1.0], &a, &cfg, GateMode::Eval).unwrap();
        let e = std::f64::consts::E;
        assert!((g.gate[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.gate[0] - 0.73106).abs() < 1e-5);
        assert_eq!(g.gate[1], 0.0);
        assert_eq!(g.selected, vec![0]);
        let again = gate(&[1.0], &a, &cfg, GateMode::Eval).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn gate_rejects_feature_mismatch() {
        let a = adapter(Tensor::zeros(&[4, 3]), vec![Tensor::zeros(&[2, 3]); 4]);
        assert!(gate(&[1.0, 2.0], &a, &MemoeConfig::default(), GateMode::Eval).is_err());
    }

    #[test]
    fn experts_apply_examples() {
        let x = [1.0, -2.0, 0.5];
        let id = Tensor::identity(3);
        let a = adapter(Tensor::zeros(&[2, 3]), vec![id.clone(), id.scale(5.0)]);
        assert_eq!(experts_apply(&x, &decision(vec![1.0, 0.0]), &a).unwrap(), x.to_vec());
        assert_eq!(experts_apply(&x, &decision(vec![0.0, 0.0]), &a).unwrap(), vec![0.0; 3]);

        let b = adapter(Tensor::zeros(&[2, 3]), vec![id.scale(2.0), id.scale(-1.0)]);
        let g = decision(vec![0.6, 0.3]);
        let sparse = experts_apply(&x, &g, &b).unwrap();
        let oracle = dense_sum(&x, &g, &b);
        for ((s, o), xi) in sparse.iter().zip(&oracle).zip(&x) {
            assert!((s - o).abs() < 1e-12);
            assert!((s - 0.9 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn memoe_forward_examples() {
        let x = [1.0, -2.0, 0.5];
        let id = Tensor::identity(3);
        let a = adapter(Tensor::zeros(&[2, 3]), vec![id.clone(), Tensor::zeros(&[3, 3])]);
        let w0 = Tensor::matrix(3, 3, vec![0.5, 1.0, 0.0, 0.0, 2.0, -1.0, 3.0, 0.0, 1.0]);
        let g = decision(vec![1.0, 0.0]);
        assert_eq!(memoe_forward(&x, &w0, &a, &g, 0.0).unwrap(), matvec(&w0, &x).unwrap());
        assert_eq!(memoe_forward(&x, &Tensor::zeros(&[3, 3]), &a, &g, 1.0).unwrap(), x.to_vec());
        let h = memoe_forward(&x, &id, &a, &g, 0.5).unwrap();
        let oracle: Vec<f64> = matvec(&id, &x)
            .unwrap()
            .iter()
            .zip(dense_sum(&x, &g, &a))
            .map(|(b, e)| b + 0.5 * e)
            .collect();
        for ((hv, ov), xi) in h.iter().zip(&oracle).zip(&x) {
            assert!((hv - ov).abs() < 1e-15);
            assert!((hv - 1.5 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn balance_loss_examples() {
        let uniform = GateDecision::from_probs(vec![0.25; 4], 1).unwrap();
        // With uniform probabilities top-1 always picks expert 0, so f is
        // one-hot while P is uniform: α·4·(1·0.25) = α.
        assert!((load_balance_loss(&[uniform], 0.5, 4).unwrap() - 0.5).abs() < 1e-12);
        let batch: Vec<GateDecision> = (0..4)
            .map(|e| {
                let mut p = vec![0.0; 4];
                p[e] = 1.0;
                GateDecision::from_probs(p, 1).unwrap()
            })
            .collect();
        assert!((load_balance_loss(&batch, 0.3, 4).unwrap() - 0.3).abs() < 1e-12);
        let collapsed: Vec<GateDecision> = (0..8)
            .map(|_| GateDecision::from_probs(vec![1.0, 0.0, 0.0, 0.0], 1).unwrap())
            .collect();
        assert!((load_balance_loss(&collapsed, 0.3, 4).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(load_balance_loss(&collapsed, 0.0, 4).unwrap(), 0.0);
        assert!(load_balance_loss(&[], 0.3, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MemoeConfig::default().validate().is_ok());
        let bad = MemoeConfig {
            top_k: 5,
            ..MemoeConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = MemoeConfig {
            lambda: -1.0,
            ..MemoeConfig::default()
        };
        assert!(neg.validate().is_err());
        let model = ModelConfig::desk(50, 0);
        assert!(MemoeConfig::default().validate_for(&model).is_ok());
        for layer in [0, 2] {
            let c = MemoeConfig {
                target_layer: layer,
                ..MemoeConfig::default()
            };
            assert!(c.validate_for(&model).is_err());
        }
    }

    #[test]
    fn kv_roundtrip_and_errors() {
        let cfg = MemoeConfig {
            lambda: 0.3,
            lr: 2e-4,
            routing: RoutingStrategy::Sentence,
            ..MemoeConfig::default()
        };
        let text = cfg.to_kv_string();
        for f in KV_FIELDS {
            assert!(text.contains(&format!("{f}=")));
        }
        assert_eq!(MemoeConfig::from_kv_str(&text).unwrap(), cfg);
        let missing: String = text.lines().filter(|l| !l.starts_with("lambda")).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            MemoeConfig::from_kv_str(&missing),
            Err(Error::MissingField { ref field, .. }) if field == "lambda"
        ));
        assert!(MemoeConfig::from_kv_str("bogus=1\n").is_err());
    }

    #[test]
    fn adapter_checkpoint_roundtrip() {
        let cfg = MemoeConfig::default();
        let model = ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 8,
            seed: 0,
        };
        let mut a = AdapterState::init(&cfg, &model).unwrap();
        a.experts[2].data_mut()[5] = 0.125;
        a.step_count = 17;
        let bytes = a.to_bytes(&cfg).unwrap();
        let (back, back_cfg) = AdapterState::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.to_bytes(&back_cfg).unwrap(), bytes);
        assert!(ModelSnapshot::from_bytes(&bytes).is_err());
        back.validate(&cfg, &model).unwrap();
        assert_eq!(back.feature_dim(), 8);
    }
}
