//! Editing protocols: single, batch with rollback, sequential and
//! sequential-batch.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::{anchor_embedding, entity_embeddings, extract_entities, EntityEmbeddings, Gazetteer};
use crate::dataset::EditRecord;
use crate::error::{Error, Result};
use crate::eval::{
    average, consistency, fraction, generality_hits, locality_hits, reliability_hits, utilization_histogram,
    EvalCase, Grouping, MetricsReport, ModelState, Probe, RoutingTrace, TraceRole,
};
use crate::memoe::{edit_step, route_top1, AdapterState, EditExample, MemoeConfig, RoutingContext, RoutingStrategy};
use crate::model::ModelSnapshot;
use crate::optim::Optimizer;
use crate::rng;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Single,
    Batch,
    Sequential,
    SequentialBatch,
}

impl ProtocolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Batch => "batch",
            Self::Sequential => "sequential",
            Self::SequentialBatch => "sequential_batch",
        }
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "single" => Ok(Self::Single),
            "batch" => Ok(Self::Batch),
            "sequential" => Ok(Self::Sequential),
            "sequential_batch" => Ok(Self::SequentialBatch),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected single, batch, sequential or sequential-batch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: ProtocolMode,
    pub batch_size: usize,
    pub total_edits: usize,
    pub steps_per_batch: usize,
    pub rollback_between_batches: bool,
}

pub const DEFAULT_STEPS_PER_BATCH: usize = 200;

impl ProtocolConfig {
    pub fn single() -> Self {
        Self {
            mode: ProtocolMode::Single,
            batch_size: 1,
            total_edits: 1,
            steps_per_batch: DEFAULT_STEPS_PER_BATCH,
            rollback_between_batches: false,
        }
    }

    pub fn batch(batch_size: usize, total_edits: usize) -> Self {
        Self {
            mode: ProtocolMode::Batch,
            batch_size,
            total_edits,
            steps_per_batch: DEFAULT_STEPS_PER_BATCH,
            rollback_between_batches: true,
        }
    }

    pub fn sequential(total_edits: usize) -> Self {
        Self {
            mode: ProtocolMode::Sequential,
            batch_size: 1,
            total_edits,
            steps_per_batch: DEFAULT_STEPS_PER_BATCH,
            rollback_between_batches: false,
        }
    }

    pub fn sequential_batch(batch_size: usize, total_edits: usize) -> Self {
        Self {
            mode: ProtocolMode::SequentialBatch,
            batch_size,
            total_edits,
            steps_per_batch: DEFAULT_STEPS_PER_BATCH,
            rollback_between_batches: false,
        }
    }

    /// Defaults per mode: batches of 30, sequential batches of 10 over
    /// 1000 edits.
    pub fn default_for(mode: ProtocolMode) -> Self {
        match mode {
            ProtocolMode::Single => Self::single(),
            ProtocolMode::Batch => Self::batch(30, 30),
            ProtocolMode::Sequential => Self::sequential(1000),
            ProtocolMode::SequentialBatch => Self::sequential_batch(10, 1000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_edits == 0 {
            return Err(Error::Config("batch_size and total_edits must be at least 1".into()));
        }
        match self.mode {
            ProtocolMode::Single if self.batch_size != 1 || self.total_edits != 1 => {
                return Err(Error::Config("single mode edits exactly one record".into()))
            }
            ProtocolMode::Sequential if self.batch_size != 1 => {
                return Err(Error::Config("sequential mode uses batch_size 1".into()))
            }
            _ => {}
        }
        if self.rollback_between_batches && self.mode != ProtocolMode::Batch {
            return Err(Error::Config("rollback between batches applies to batch mode only".into()));
        }
        Ok(())
    }

    /// Number of batches `S`; the last may be short.
    pub fn num_batches(&self) -> usize {
        self.total_edits.div_ceil(self.batch_size)
    }
}

/// Loss history of one trained batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub index: usize,
    pub record_ids: Vec<String>,
    pub task_loss: Vec<f64>,
    pub aux_loss: Vec<f64>,
}

impl BatchLog {
    pub fn first_task_loss(&self) -> Option<f64> {
        self.task_loss.first().copied()
    }

    pub fn last_task_loss(&self) -> Option<f64> {
        self.task_loss.last().copied()
    }
}

/// An adapter after editing, with the pristine copy it started from.
#[derive(Clone, Debug, PartialEq)]
pub struct EditedState {
    pub adapter: AdapterState,
    pub pristine: Option<AdapterState>,
    pub history: Vec<BatchLog>,
}

impl EditedState {
    pub fn fresh(adapter: AdapterState) -> Self {
        Self {
            pristine: Some(adapter.clone()),
            adapter,
            history: Vec::new(),
        }
    }
}

/// Restores the pristine adapter. Idempotent.
pub fn rollback(state: &mut EditedState) -> Result<()> {
    let pristine = state.pristine.as_ref().ok_or(Error::MissingPristine)?;
    state.adapter.clone_from(pristine);
    Ok(())
}

/// Update rule for edit training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    #[default]
    Adam,
}

/// Encodes records and runs edit training against one frozen base model.
pub struct Editor<'a> {
    pub snapshot: &'a ModelSnapshot,
    pub vocab: &'a Vocab,
    pub gazetteer: &'a Gazetteer,
    pub config: MemoeConfig,
    pub rule: UpdateRule,
    entities: EntityEmbeddings,
}

impl<'a> Editor<'a> {
    pub fn new(snapshot: &'a ModelSnapshot, vocab: &'a Vocab, gazetteer: &'a Gazetteer, config: MemoeConfig) -> Result<Self> {
        config.validate_for(snapshot.config())?;
        if config.routing == RoutingStrategy::Anchor && gazetteer.is_empty() {
            return Err(Error::Config("anchor routing needs a non-empty gazetteer".into()));
        }
        if vocab.len() != snapshot.config().vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} words, model expects {}",
                vocab.len(),
                snapshot.config().vocab_size
            )));
        }
        let entities = entity_embeddings(gazetteer, vocab, snapshot)?;
        Ok(Self {
            snapshot,
            vocab,
            gazetteer,
            config,
            rule: UpdateRule::default(),
            entities,
        })
    }

    pub fn fresh_adapter(&self) -> Result<AdapterState> {
        AdapterState::init(&self.config, self.snapshot.config())
    }

    /// Token ids and routing context for one input text.
    pub fn probe(&self, text: &str) -> Result<Probe> {
        let tokens = self.vocab.encode(text);
        let spans = extract_entities(text, self.gazetteer);
        let anchor = if spans.is_empty() {
            None
        } else {
            Some(anchor_embedding(&spans, &self.entities, self.snapshot.config().d_model)?)
        };
        let context = RoutingContext::from_tokens(&tokens, self.snapshot, anchor)?;
        Ok(Probe { tokens, context })
    }

    pub fn case(&self, record: &EditRecord) -> Result<EvalCase> {
        let target = self.vocab.encode(&record.target_new);
        if target.is_empty() {
            return Err(Error::InvalidArgument(format!("record {} has an empty target", record.record_id)));
        }
        Ok(EvalCase {
            record_id: record.record_id.clone(),
            group_id: record.group_id.clone(),
            prompt: self.probe(&record.prompt)?,
            rephrase: self.probe(&record.rephrase_prompt)?,
            locality: self.probe(&record.locality_prompt)?,
            target,
            locality_reference: record.locality_ground_truth.clone(),
        })
    }

    pub fn cases(&self, records: &[EditRecord]) -> Result<Vec<EvalCase>> {
        records.iter().map(|r| self.case(r)).collect()
    }

    /// A fresh optimizer at the configured learning rate.
    pub fn optimizer(&self) -> Optimizer {
        match self.rule {
            UpdateRule::Sgd => Optimizer::sgd(self.config.lr),
            UpdateRule::Adam => Optimizer::adam(self.config.lr),
        }
    }

    /// Trains `adapter` on one batch for `steps` steps. Gate noise comes
    /// from a stream keyed by the seed and the batch's record ids, so a
    /// batch trains identically whatever ran before it.
    pub fn train_batch(&self, adapter: &mut AdapterState, batch: &[EvalCase], steps: usize, index: usize) -> Result<BatchLog> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("edit batch"));
        }
        let examples = batch
            .iter()
            .map(|c| EditExample::new(&c.prompt.tokens, &c.target, c.prompt.context.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        for c in batch {
            h.update(c.record_id.as_bytes());
            h.update([0]);
        }
        let mut noise = rng::stream_with(self.config.seed, "noise", &h.finalize());
        let mut opt = self.optimizer();
        let mut log = BatchLog {
            index,
            record_ids: batch.iter().map(|c| c.record_id.clone()).collect(),
            task_loss: Vec::with_capacity(steps),
            aux_loss: Vec::with_capacity(steps),
        };
        for _ in 0..steps {
            let l = edit_step(&examples, self.snapshot, adapter, &self.config, &mut opt, &mut noise)?;
            log.task_loss.push(l.task);
            log.aux_loss.push(l.aux);
        }
        Ok(log)
    }

    /// Evaluation-mode routing traces for each case's prompt (train role)
    /// and rephrase (test role).
    pub fn traces(&self, adapter: &AdapterState, cases: &[EvalCase]) -> Result<Vec<RoutingTrace>> {
        if cases.is_empty() {
            return Ok(Vec::new());
        }
        let mut seqs = Vec::with_capacity(2 * cases.len());
        let mut contexts = Vec::with_capacity(2 * cases.len());
        for c in cases {
            seqs.push(c.prompt.tokens.clone());
            contexts.push(c.prompt.context.clone());
            seqs.push(c.rephrase.tokens.clone());
            contexts.push(c.rephrase.context.clone());
        }
        let routes = route_top1(&seqs, self.snapshot, adapter, &self.config, &contexts)?;
        Ok(cases
            .iter()
            .zip(routes.chunks(2))
            .flat_map(|(c, r)| {
                [TraceRole::Train, TraceRole::Test]
                    .into_iter()
                    .zip(r.iter())
                    .map(|(role, experts)| RoutingTrace {
                        record_id: c.record_id.clone(),
                        group_id: c.group_id.clone(),
                        role,
                        experts: experts.clone(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Per-record outcomes of `cases` under `adapter`.
    pub fn outcomes(&self, adapter: &AdapterState, cases: &[EvalCase]) -> Result<Outcomes> {
        let state = ModelState::with_adapter(self.snapshot, adapter, &self.config);
        Ok(Outcomes {
            reliable: reliability_hits(state, cases)?,
            general: generality_hits(state, cases)?,
            local: locality_hits(state, cases)?,
            traces: self.traces(adapter, cases)?,
        })
    }
}

/// Per-record metric outcomes and routing traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub reliable: Vec<bool>,
    pub general: Vec<bool>,
    pub local: Vec<bool>,
    pub traces: Vec<RoutingTrace>,
}

impl Outcomes {
    pub fn extend(&mut self, other: Outcomes) {
        self.reliable.extend(other.reliable);
        self.general.extend(other.general);
        self.local.extend(other.local);
        self.traces.extend(other.traces);
    }
}

/// Trains one fresh adapter on all `records` together.
pub fn run_batch_edit(editor: &Editor<'_>, records: &[EvalCase], protocol: &ProtocolConfig) -> Result<EditedState> {
    let mut state = EditedState::fresh(editor.fresh_adapter()?);
    let log = editor.train_batch(&mut state.adapter, records, protocol.steps_per_batch, 0)?;
    state.history.push(log);
    Ok(state)
}

/// A batch edit of one record.
pub fn run_single_edit(editor: &Editor<'_>, record: &EvalCase, protocol: &ProtocolConfig) -> Result<EditedState> {
    run_batch_edit(editor, std::slice::from_ref(record), protocol)
}

/// One persistent adapter trained on consecutive batches of
/// `protocol.batch_size` records, in order, without rollback.
pub fn run_sequential_batch(editor: &Editor<'_>, records: &[EvalCase], protocol: &ProtocolConfig) -> Result<EditedState> {
    if records.is_empty() {
        return Err(Error::EmptyInput("edit records"));
    }
    let mut state = EditedState::fresh(editor.fresh_adapter()?);
    for (i, chunk) in records.chunks(protocol.batch_size).enumerate() {
        let log = editor.train_batch(&mut state.adapter, chunk, protocol.steps_per_batch, i)?;
        state.history.push(log);
    }
    Ok(state)
}

/// Result of a whole protocol run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub state: EditedState,
    pub outcomes: Outcomes,
    pub report: MetricsReport,
}

pub fn report(editor: &Editor<'_>, mode: ProtocolMode, outcomes: &Outcomes) -> Result<MetricsReport> {
    let r = fraction(&outcomes.reliable)?;
    let g = fraction(&outcomes.general)?;
    let l = fraction(&outcomes.local)?;
    let c = &editor.config;
    Ok(MetricsReport {
        mode: mode.to_string(),
        seed: c.seed,
        num_experts: c.num_experts,
        top_k: c.top_k,
        target_layer: c.target_layer,
        lambda: c.lambda,
        routing: c.routing.to_string(),
        reliability: r,
        generality: g,
        locality: l,
        average: average(r, g, l)?,
        consistency_similar: consistency(&outcomes.traces, Grouping::Similar).ok().map(|x| x.overall),
        consistency_same: consistency(&outcomes.traces, Grouping::Same).ok().map(|x| x.overall),
        expert_histogram: utilization_histogram(&outcomes.traces, c.num_experts)?,
        num_records: outcomes.reliable.len(),
    })
}

/// Runs `protocol` over the first `total_edits` records and evaluates.
///
/// Single and batch modes evaluate each batch right after training it;
/// with rollback every batch starts from the pristine adapter. Sequential
/// modes evaluate all records once, with the final adapter.
pub fn run_protocol(editor: &Editor<'_>, records: &[EvalCase], protocol: &ProtocolConfig) -> Result<RunResult> {
    protocol.validate()?;
    if records.len() < protocol.total_edits {
        return Err(Error::InvalidArgument(format!(
            "{} edits requested, {} records available",
            protocol.total_edits,
            records.len()
        )));
    }
    let records = &records[..protocol.total_edits];
    let mut outcomes = Outcomes::default();
    let state = match protocol.mode {
        ProtocolMode::Single | ProtocolMode::Batch => {
            let mut state = EditedState::fresh(editor.fresh_adapter()?);
            for (i, chunk) in records.chunks(protocol.batch_size).enumerate() {
                if protocol.rollback_between_batches || protocol.mode == ProtocolMode::Single {
                    rollback(&mut state)?;
                }
                let log = editor.train_batch(&mut state.adapter, chunk, protocol.steps_per_batch, i)?;
                state.history.push(log);
                outcomes.extend(editor.outcomes(&state.adapter, chunk)?);
            }
            state
        }
        ProtocolMode::Sequential | ProtocolMode::SequentialBatch => {
            let state = run_sequential_batch(editor, records, protocol)?;
            outcomes = editor.outcomes(&state.adapter, records)?;
            state
        }
    };
    let report = report(editor, protocol.mode, &outcomes)?;
    Ok(RunResult {
        state,
        outcomes,
        report,
    })
}

/// JSON log of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: ProtocolMode,
    pub seed: u64,
    pub memoe: MemoeConfig,
    pub protocol: ProtocolConfig,
    pub base_fingerprint: String,
    pub batches: Vec<BatchLog>,
    pub metrics: MetricsReport,
}

impl RunManifest {
    pub fn new(editor: &Editor<'_>, protocol: &ProtocolConfig, run: &RunResult) -> Self {
        Self {
            mode: protocol.mode,
            seed: editor.config.seed,
            memoe: editor.config.clone(),
            protocol: protocol.clone(),
            base_fingerprint: editor.snapshot.fingerprint().to_owned(),
            batches: run.state.history.clone(),
            metrics: run.report.clone(),
        }
    }

    pub fn file_name(&self) -> String {
        format!("run-{}-{}.json", self.mode, self.seed)
    }

    /// Writes the manifest into `dir` under its canonical name.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
