use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use serde::{Deserialize, Serialize};

use memoe::anchor::Gazetteer;
use memoe::dataset::{self, CorpusSpec, EditRecord};
use memoe::eval::{CsvRow, MetricsReport};
use memoe::harness::{run_protocol, Editor, ProtocolConfig, ProtocolMode, RunManifest, UpdateRule};
use memoe::memoe::{MemoeConfig, RoutingStrategy};
use memoe::model::{ModelConfig, ModelSnapshot};
use memoe::train::{corpus_loss, train_base_with, TrainOptions};
use memoe::vocab::Vocab;

use crate::layout::Layout;
use crate::{require, CmdResult, Common, Failure};

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).context("serialize json")?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Number of edit records (and of background facts).
    #[arg(long)]
    facts: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    relations: usize,
    #[arg(long, default_value_t = 8)]
    entities_per_relation: usize,
    #[arg(long, default_value_t = 2)]
    rephrases: usize,
}

pub fn gen_data(a: &GenDataArgs) -> CmdResult {
    let layout = a.common.layout();
    let spec = CorpusSpec {
        num_facts: a.facts,
        num_relations: a.relations,
        entities_per_relation: a.entities_per_relation,
        rephrases_per_fact: a.rephrases,
        ..CorpusSpec::desk(a.facts, a.seed)
    };
    let corpus = dataset::generate(&spec)?;
    let dir = layout.corpus();
    corpus.write_dir(&dir)?;
    println!(
        "records={} pretrain={} gazetteer={} vocab={}",
        corpus.records.len(),
        corpus.pretrain.len(),
        corpus.gazetteer.len(),
        corpus.vocab.len()
    );
    println!("corpus_dir={}", dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 32)]
    max_seq_len: usize,
    #[arg(long, default_value_t = TrainOptions::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainOptions::default().lr)]
    lr: f64,
    /// Sequences per step; 0 uses the whole corpus.
    #[arg(long, default_value_t = TrainOptions::default().batch_size)]
    batch_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainReport {
    model: ModelConfig,
    options: TrainOptions,
    fingerprint: String,
    initial_loss: f64,
    final_loss: f64,
    window_means: Vec<f64>,
    losses: Vec<f64>,
}

struct CorpusFiles {
    vocab: Vocab,
    gazetteer: Gazetteer,
    pretrain: Vec<String>,
    records: Vec<EditRecord>,
    spec: Option<CorpusSpec>,
}

fn load_corpus(layout: &Layout) -> Result<CorpusFiles, Failure> {
    let dir = layout.corpus();
    for f in [dataset::VOCAB_FILE, dataset::GAZETTEER_FILE, dataset::PRETRAIN_FILE, dataset::RECORDS_FILE] {
        require(&dir.join(f), "corpus file")?;
    }
    let spec = fs::read_to_string(dir.join(dataset::MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<dataset::CorpusManifest>(&t).ok())
        .map(|m| m.spec);
    Ok(CorpusFiles {
        vocab: Vocab::load(&dir.join(dataset::VOCAB_FILE))?,
        gazetteer: Gazetteer::load(&dir.join(dataset::GAZETTEER_FILE))?,
        pretrain: dataset::read_pretrain(&dir.join(dataset::PRETRAIN_FILE))?,
        records: dataset::read_jsonl(&dir.join(dataset::RECORDS_FILE))?,
        spec,
    })
}

pub fn train_base(a: &TrainBaseArgs) -> CmdResult {
    let layout = a.common.layout();
    let corpus = load_corpus(&layout)?;
    let config = ModelConfig {
        vocab_size: corpus.vocab.len(),
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_seq_len: a.max_seq_len,
        seed: a.seed,
    };
    config.validate()?;
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        batch_size: a.batch_size,
        ..TrainOptions::default()
    };
    let seqs = dataset::encode_sentences(&corpus.pretrain, &corpus.vocab);
    let initial_loss = corpus_loss(&seqs, &ModelSnapshot::init(config.clone())?)?;
    let (snapshot, log) = train_base_with(&seqs, config.clone(), &opts)?;
    let final_loss = corpus_loss(&seqs, &snapshot)?;

    fs::create_dir_all(layout.base())?;
    snapshot.save(&layout.base_checkpoint())?;
    let records = dataset::attach_locality_ground_truth(&corpus.records, &corpus.vocab, &snapshot)?;
    dataset::write_jsonl(&records, &layout.base_records())?;
    let report = TrainReport {
        model: config,
        options: opts,
        fingerprint: snapshot.fingerprint().to_owned(),
        initial_loss,
        final_loss,
        window_means: log.window_means(),
        losses: log.losses,
    };
    write_json(&layout.train_log(), &report)?;
    for (i, m) in report.window_means.iter().enumerate() {
        println!("window {i:>3}  mean_loss={m:.6}");
    }
    println!("initial_loss={initial_loss:.6} final_loss={final_loss:.6}");
    println!("fingerprint={}", report.fingerprint);
    println!("checkpoint={}", layout.base_checkpoint().display());
    Ok(())
}

/// Everything needed to rerun an edit experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub memoe: MemoeConfig,
    pub protocol: ProtocolConfig,
    pub corpus: Option<CorpusSpec>,
    pub update_rule: UpdateRule,
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AdapterFlags {
    /// MemoeConfig key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Saved experiment.json; flags override it.
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or sgd.
    #[arg(long)]
    update_rule: Option<String>,
}

fn parse_rule(s: &str) -> Result<UpdateRule, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "adam" => Ok(UpdateRule::Adam),
        "sgd" => Ok(UpdateRule::Sgd),
        other => Err(Failure::usage(format!("unknown update rule `{other}` (expected adam or sgd)"))),
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    adapter: AdapterFlags,
    /// single, batch, sequential or sequential-batch.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_edits: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Subdirectory of runs/ (default derived from the configuration).
    #[arg(long)]
    run_name: Option<String>,
}

struct Loaded {
    snapshot: ModelSnapshot,
    corpus: CorpusFiles,
}

fn load_base(layout: &Layout) -> Result<Loaded, Failure> {
    let mut corpus = load_corpus(layout)?;
    require(&layout.base_checkpoint(), "base checkpoint")?;
    require(&layout.base_records(), "base records")?;
    let snapshot = ModelSnapshot::load(&layout.base_checkpoint())?;
    corpus.records = dataset::read_jsonl(&layout.base_records())?;
    dataset::verify_locality_ground_truth(&corpus.records, &corpus.vocab, &snapshot)?;
    Ok(Loaded { snapshot, corpus })
}

/// Applies flag overrides on top of a base configuration.
fn resolve_memoe(flags: &AdapterFlags, saved: Option<&ExperimentConfig>) -> Result<(MemoeConfig, UpdateRule), Failure> {
    let mut cfg = match (&flags.config, saved) {
        (Some(path), _) => {
            require(path, "config file")?;
            MemoeConfig::load(path)?
        }
        (None, Some(e)) => e.memoe.clone(),
        (None, None) => MemoeConfig::default(),
    };
    if let Some(r) = &flags.routing {
        cfg.routing = r.parse::<RoutingStrategy>()?;
    }
    if let Some(v) = flags.experts {
        cfg.num_experts = v;
    }
    if let Some(v) = flags.topk {
        cfg.top_k = v;
    }
    if let Some(v) = flags.layer {
        cfg.target_layer = v;
    }
    if let Some(v) = flags.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = flags.noise {
        cfg.noise_scale = v;
    }
    if let Some(v) = flags.aux_weight {
        cfg.aux_weight = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let rule = match &flags.update_rule {
        Some(s) => parse_rule(s)?,
        None => saved.map(|e| e.update_rule).unwrap_or_default(),
    };
    Ok((cfg, rule))
}

fn default_total(mode: ProtocolMode, batch_size: usize, available: usize) -> usize {
    match mode {
        ProtocolMode::Single | ProtocolMode::Batch => batch_size,
        ProtocolMode::Sequential | ProtocolMode::SequentialBatch => {
            ProtocolConfig::default_for(mode).total_edits.min(available)
        }
    }
}

fn run_label(mode: ProtocolMode, c: &MemoeConfig) -> String {
    format!(
        "{mode}-E{}-k{}-L{}-{}-lam{}",
        c.num_experts, c.top_k, c.target_layer, c.routing, c.lambda
    )
}

pub fn edit(a: &EditArgs) -> CmdResult {
    let layout = a.common.layout();
    let saved: Option<ExperimentConfig> = match &a.adapter.experiment {
        Some(p) => {
            require(p, "experiment file")?;
            Some(serde_json::from_str(&fs::read_to_string(p)?).map_err(memoe::Error::from)?)
        }
        None => None,
    };
    let (memoe_cfg, rule) = resolve_memoe(&a.adapter, saved.as_ref())?;
    let mode = match (&a.mode, &saved) {
        (Some(m), _) => m.parse::<ProtocolMode>()?,
        (None, Some(e)) => e.protocol.mode,
        (None, None) => ProtocolMode::Batch,
    };
    let base_protocol = match &saved {
        Some(e) if e.protocol.mode == mode => e.protocol.clone(),
        _ => ProtocolConfig::default_for(mode),
    };
    let loaded = load_base(&layout)?;
    memoe_cfg.validate_for(loaded.snapshot.config())?;

    let mut protocol = base_protocol;
    if let Some(n) = a.batch_size {
        protocol.batch_size = n;
    }
    protocol.total_edits = match (a.total_edits, &saved) {
        (Some(n), _) => n,
        (None, Some(e)) if e.protocol.mode == mode && a.batch_size.is_none() => e.protocol.total_edits,
        _ => default_total(mode, protocol.batch_size, loaded.corpus.records.len()),
    };
    if let Some(s) = a.steps {
        protocol.steps_per_batch = s;
    }
    protocol.validate()?;
    if protocol.total_edits % protocol.batch_size != 0 {
        eprintln!(
            "note: {} edits in batches of {} leaves a short final batch",
            protocol.total_edits, protocol.batch_size
        );
    }

    let mut editor = Editor::new(&loaded.snapshot, &loaded.corpus.vocab, &loaded.corpus.gazetteer, memoe_cfg.clone())?;
    editor.rule = rule;
    let cases = editor.cases(&loaded.corpus.records)?;
    let fingerprint = loaded.snapshot.fingerprint().to_owned();
    let run = run_protocol(&editor, &cases, &protocol)?;
    if loaded.snapshot.fingerprint() != fingerprint {
        return Err(Failure::Internal(anyhow::anyhow!("base snapshot changed during editing")));
    }

    let run_dir = layout
        .runs()
        .join(a.run_name.clone().unwrap_or_else(|| run_label(mode, &memoe_cfg)));
    fs::create_dir_all(&run_dir)?;
    let manifest = RunManifest::new(&editor, &protocol, &run);
    let manifest_path = manifest.write(&run_dir)?;
    run.state
        .adapter
        .save(&memoe_cfg, &run_dir.join(format!("adapter-{mode}-{}.ckpt", memoe_cfg.seed)))?;
    memoe_cfg.save(&run_dir.join("memoe.cfg"))?;
    fs::write(run_dir.join("metrics.csv"), run.report.to_csv()?)?;
    let experiment = ExperimentConfig {
        model: loaded.snapshot.config().clone(),
        memoe: memoe_cfg,
        protocol,
        corpus: loaded.corpus.spec.clone(),
        update_rule: rule,
        out: layout.root().to_path_buf(),
    };
    write_json(&run_dir.join("experiment.json"), &experiment)?;

    let r = &run.report;
    println!(
        "reliability={:.4} generality={:.4} locality={:.4} average={:.4} consistency_similar={} consistency_same={}",
        r.reliability,
        r.generality,
        r.locality,
        r.average,
        fmt_opt(r.consistency_similar),
        fmt_opt(r.consistency_same)
    );
    println!("expert_histogram={:?}", r.expert_histogram);
    println!("manifest={}", manifest_path.display());
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{:.2}", 100.0 * x))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"))
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    experts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    topk: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "anchor")]
    routing: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    lambda: Vec<f64>,
    #[arg(long, default_value = "batch")]
    mode: String,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long)]
    total_edits: Option<usize>,
    #[arg(long, default_value_t = memoe::harness::DEFAULT_STEPS_PER_BATCH)]
    steps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "adam")]
    update_rule: String,
}

type RowKey = (String, u64, usize, usize, usize, u64, String);

fn row_key(r: &CsvRow) -> RowKey {
    (
        r.mode.clone(),
        r.seed,
        r.experts,
        r.k,
        r.layer,
        r.lambda.to_bits(),
        r.routing.clone(),
    )
}

fn read_rows(path: &Path) -> Result<Vec<CsvRow>, Failure> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("open {}", path.display()))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row.with_context(|| format!("parse {}", path.display())).map_err(Failure::Usage)?);
    }
    Ok(out)
}

pub fn ablate(a: &AblateArgs) -> CmdResult {
    let layout = a.common.layout();
    let mode: ProtocolMode = a.mode.parse()?;
    let rule = parse_rule(&a.update_rule)?;
    let routings = a
        .routing
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<RoutingStrategy>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut grid = Vec::new();
    for &layer in &a.layers {
        for &e in &a.experts {
            for &k in &a.topk {
                for &routing in &routings {
                    for &lambda in &a.lambda {
                        grid.push(MemoeConfig {
                            num_experts: e,
                            top_k: k,
                            target_layer: layer,
                            lambda,
                            routing,
                            seed: a.seed,
                            ..MemoeConfig::default()
                        });
                    }
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(Failure::usage("empty ablation grid"));
    }
    let loaded = load_base(&layout)?;
    for cfg in &grid {
        cfg.validate_for(loaded.snapshot.config())?;
    }
    let mut protocol = ProtocolConfig::default_for(mode);
    protocol.batch_size = a.batch_size;
    protocol.total_edits = a
        .total_edits
        .unwrap_or_else(|| default_total(mode, a.batch_size, loaded.corpus.records.len()));
    protocol.steps_per_batch = a.steps;
    protocol.validate()?;

    let path = layout.ablation_csv();
    fs::create_dir_all(path.parent().expect("ablation csv has a parent"))?;
    let existing = if path.exists() { read_rows(&path)? } else { Vec::new() };
    if existing.is_empty() {
        // Drop a header left by an interrupted first run.
        fs::write(&path, "")?;
    }
    let done: BTreeSet<RowKey> = existing.iter().map(row_key).collect();
    let mut writer = csv::WriterBuilder::new()
        .has_headers(existing.is_empty())
        .from_writer(fs::OpenOptions::new().append(true).open(&path)?);

    let mut ran = 0;
    for cfg in grid {
        let probe_row = CsvRow {
            mode: mode.to_string(),
            seed: cfg.seed,
            experts: cfg.num_experts,
            k: cfg.top_k,
            layer: cfg.target_layer,
            lambda: cfg.lambda,
            routing: cfg.routing.to_string(),
            reliability: 0.0,
            generality: 0.0,
            locality: 0.0,
            average: 0.0,
            consistency_similar: None,
            consistency_same: None,
        };
        if done.contains(&row_key(&probe_row)) {
            println!("skip {}", run_label(mode, &cfg));
            continue;
        }
        let mut editor = Editor::new(&loaded.snapshot, &loaded.corpus.vocab, &loaded.corpus.gazetteer, cfg.clone())?;
        editor.rule = rule;
        let cases = editor.cases(&loaded.corpus.records)?;
        let run = run_protocol(&editor, &cases, &protocol)?;
        writer.serialize(run.report.csv_row()).context("write ablation row")?;
        writer.flush()?;
        ran += 1;
        println!(
            "{}  reliability={:.4} generality={:.4} locality={:.4} average={:.4}",
            run_label(mode, &cfg),
            run.report.reliability,
            run.report.generality,
            run.report.locality,
            run.report.average
        );
    }
    println!("ran={ran} csv={}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Run manifests or ablation CSVs (default: everything under the
    /// experiment directory).
    #[arg(long)]
    input: Vec<PathBuf>,
}

fn collect_inputs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_inputs(&p, out)?;
        } else if is_manifest(&p) || is_csv(&p) {
            out.push(p);
        }
    }
    Ok(())
}

fn is_manifest(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.starts_with("run-") && name.ends_with(".json")
}

fn is_csv(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name == "ablation.csv"
}

struct Row {
    label: String,
    row: CsvRow,
}

const AXES: [&str; 5] = ["E", "layer", "k", "routing", "lambda"];

fn axis_value(r: &CsvRow, axis: &str) -> String {
    match axis {
        "E" => r.experts.to_string(),
        "layer" => r.layer.to_string(),
        "k" => r.k.to_string(),
        "routing" => r.routing.clone(),
        _ => r.lambda.to_string(),
    }
}

pub fn report(a: &ReportArgs) -> CmdResult {
    let layout = a.common.layout();
    let mut inputs = Vec::new();
    if a.input.is_empty() {
        collect_inputs(layout.root(), &mut inputs)?;
    } else {
        for p in &a.input {
            require(p, "report input")?;
            if p.is_dir() {
                collect_inputs(p, &mut inputs)?;
            } else {
                inputs.push(p.clone());
            }
        }
    }

    let mut rows = Vec::new();
    let mut sweeps: Vec<Vec<CsvRow>> = Vec::new();
    for p in &inputs {
        if is_csv(p) || p.extension().is_some_and(|e| e == "csv") {
            let r = read_rows(p)?;
            rows.extend(r.iter().map(|row| Row {
                label: format!("ablate:{}", run_label(row.mode.parse().unwrap_or(ProtocolMode::Batch), &cfg_of(row))),
                row: row.clone(),
            }));
            sweeps.push(r);
        } else {
            let m = RunManifest::read(p)?;
            let metrics: &MetricsReport = &m.metrics;
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_owned();
            rows.push(Row {
                label,
                row: metrics.csv_row(),
            });
        }
    }
    if rows.is_empty() {
        return Err(Failure::usage(format!("no runs found under {}", layout.root().display())));
    }
    rows.sort_by(|x, y| {
        y.row
            .average
            .total_cmp(&x.row.average)
            .then_with(|| x.label.cmp(&y.label))
    });

    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    println!(
        "{:<width$}  {:>11} {:>10} {:>8} {:>7} {:>8} {:>9}",
        "run", "reliability", "generality", "locality", "average", "cons_sim", "cons_same"
    );
    for r in &rows {
        println!(
            "{:<width$}  {:>11.2} {:>10.2} {:>8.2} {:>7.2} {:>8} {:>9}",
            r.label,
            100.0 * r.row.reliability,
            100.0 * r.row.generality,
            100.0 * r.row.locality,
            100.0 * r.row.average,
            fmt_pct(r.row.consistency_similar),
            fmt_pct(r.row.consistency_same),
        );
    }

    let all_sweep: Vec<CsvRow> = sweeps.into_iter().flatten().collect();
    if !all_sweep.is_empty() {
        fs::create_dir_all(layout.report())?;
        for axis in AXES {
            let mut by: BTreeMap<String, Vec<&CsvRow>> = BTreeMap::new();
            for r in &all_sweep {
                by.entry(axis_value(r, axis)).or_default().push(r);
            }
            if by.len() < 2 {
                continue;
            }
            let path = layout.report().join(format!("series-{axis}.csv"));
            let mut w = csv::Writer::from_path(&path).context("create series file")?;
            w.write_record(["x", "reliability", "generality", "locality", "average", "n"])
                .context("write series")?;
            for (x, rs) in by {
                let n = rs.len() as f64;
                let mean = |f: fn(&CsvRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                w.write_record([
                    x,
                    mean(|r| r.reliability).to_string(),
                    mean(|r| r.generality).to_string(),
                    mean(|r| r.locality).to_string(),
                    mean(|r| r.average).to_string(),
                    rs.len().to_string(),
                ])
                .context("write series")?;
            }
            w.flush()?;
            println!("series={}", path.display());
        }
    }
    Ok(())
}

fn cfg_of(r: &CsvRow) -> MemoeConfig {
    MemoeConfig {
        num_experts: r.experts,
        top_k: r.k,
        target_layer: r.layer,
        lambda: r.lambda,
        routing: r.routing.parse().unwrap_or(RoutingStrategy::Anchor),
        seed: r.seed,
        ..MemoeConfig::default()
    }
}
