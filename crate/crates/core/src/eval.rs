//! Edit metrics, routing consistency, knowledge grouping and expert
//! utilization.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memoe::{AdapterState, Attached, MemoeConfig, RoutingContext};
use crate::model::{greedy_decode, ModelSnapshot};
use crate::rng;

/// A base model with an optional attached adapter.
#[derive(Clone, Copy, Debug)]
pub struct ModelState<'a> {
    pub snapshot: &'a ModelSnapshot,
    pub adapter: Option<(&'a AdapterState, &'a MemoeConfig)>,
}

impl<'a> ModelState<'a> {
    pub fn base(snapshot: &'a ModelSnapshot) -> Self {
        Self {
            snapshot,
            adapter: None,
        }
    }

    pub fn with_adapter(snapshot: &'a ModelSnapshot, adapter: &'a AdapterState, config: &'a MemoeConfig) -> Self {
        Self {
            snapshot,
            adapter: Some((adapter, config)),
        }
    }

    /// Greedy continuation of `tokens` routed with `context`.
    pub fn decode(&self, tokens: &[usize], context: &RoutingContext, max_new: usize) -> Result<Vec<usize>> {
        let attached = self.adapter.map(|(state, config)| Attached {
            state,
            config,
            context,
        });
        greedy_decode(tokens, self.snapshot, attached, max_new)
    }
}

/// An encoded input with its routing context.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tokens: Vec<usize>,
    pub context: RoutingContext,
}

/// What the accuracy metrics need from one edit record.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub record_id: String,
    pub group_id: String,
    pub prompt: Probe,
    pub rephrase: Probe,
    pub locality: Probe,
    pub target: Vec<usize>,
    /// Pre-edit greedy output on the locality probe.
    pub locality_reference: Vec<usize>,
}

/// Greedy decode truncated at the target length equals the target.
pub fn exact_match(state: ModelState<'_>, probe: &Probe, target: &[usize]) -> Result<bool> {
    Ok(state.decode(&probe.tokens, &probe.context, target.len())? == target)
}

pub fn fraction(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(Error::EmptyInput("metric records"));
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub fn reliability_hits(state: ModelState<'_>, cases: &[EvalCase]) -> Result<Vec<bool>> {
    cases.iter().map(|c| exact_match(state, &c.prompt, &c.target)).collect()
}

pub fn generality_hits(state: ModelState<'_>, cases: &[EvalCase]) -> Result<Vec<bool>> {
    cases.iter().map(|c| exact_match(state, &c.rephrase, &c.target)).collect()
}

/// Compares each post-edit locality decode to the stored pre-edit one.
pub fn locality_hits(post: ModelState<'_>, cases: &[EvalCase]) -> Result<Vec<bool>> {
    cases
        .iter()
        .map(|c| {
            let max_new = crate::dataset::LOCALITY_MAX_NEW;
            Ok(post.decode(&c.locality.tokens, &c.locality.context, max_new)? == c.locality_reference)
        })
        .collect()
}

pub fn reliability(state: ModelState<'_>, cases: &[EvalCase]) -> Result<f64> {
    fraction(&reliability_hits(state, cases)?)
}

pub fn generality(state: ModelState<'_>, cases: &[EvalCase]) -> Result<f64> {
    fraction(&generality_hits(state, cases)?)
}

/// Fraction of locality probes whose post-edit decode equals the decode
/// of `pre`.
pub fn locality(pre: ModelState<'_>, post: ModelState<'_>, cases: &[EvalCase]) -> Result<f64> {
    let max_new = crate::dataset::LOCALITY_MAX_NEW;
    let hits = cases
        .iter()
        .map(|c| {
            let a = pre.decode(&c.locality.tokens, &c.locality.context, max_new)?;
            let b = post.decode(&c.locality.tokens, &c.locality.context, max_new)?;
            Ok(a == b)
        })
        .collect::<Result<Vec<bool>>>()?;
    fraction(&hits)
}

/// Mean of three scores given either all as fractions in `[0, 1]` or all
/// as percentages in `[0, 100]`. A value in `(0, 1]` next to one above 1
/// counts as mixed scales.
pub fn average(r: f64, g: f64, l: f64) -> Result<f64> {
    let v = [r, g, l];
    if v.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 100.0) {
        return Err(Error::InvalidArgument(format!("scores {v:?} outside [0, 100]")));
    }
    if v.iter().any(|&x| x > 1.0) && v.iter().any(|&x| x > 0.0 && x <= 1.0) {
        return Err(Error::InvalidArgument(format!("scores {v:?} mix fraction and percent scales")));
    }
    Ok((r + g + l) / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceRole {
    /// The edit prompt the adapter was trained on.
    Train,
    /// A held-out input such as a rephrase.
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub record_id: String,
    pub group_id: String,
    pub role: TraceRole,
    /// Top-1 expert per token.
    pub experts: Vec<usize>,
}

impl RoutingTrace {
    pub fn majority(&self) -> Option<usize> {
        mode(&self.experts)
    }
}

/// Most frequent value, lowest on ties.
pub fn mode(values: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
    // so iterate in reverse to prefer the lowest index.
    counts.into_iter().rev().max_by_key(|&(_, c)| c).map(|(v, _)| v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Inputs of one knowledge group against the group's majority expert.
    Similar,
    /// Each held-out input against the expert of its own training input.
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub overall: f64,
    pub per_group: BTreeMap<String, f64>,
    /// Groups with nothing to score.
    pub excluded: Vec<String>,
}

/// Per-group consistency and its unweighted mean over groups.
///
/// For `Similar`, the group's expert is the mode of the majority experts of
/// its training inputs (all inputs when it has none), and every input of the
/// group is scored. For `Same`, each test input is scored against the
/// majority expert of the training input with the same record id.
pub fn consistency(traces: &[RoutingTrace], grouping: Grouping) -> Result<ConsistencyReport> {
    let mut groups: BTreeMap<&str, Vec<&RoutingTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.group_id.as_str()).or_default().push(t);
    }
    let mut per_group = BTreeMap::new();
    let mut excluded = Vec::new();
    for (g, members) in groups {
        let scored: Option<(usize, usize)> = match grouping {
            Grouping::Similar => {
                let train: Vec<usize> = members
                    .iter()
                    .filter(|t| t.role == TraceRole::Train)
                    .filter_map(|t| t.majority())
                    .collect();
                let basis = if train.is_empty() {
                    members.iter().filter_map(|t| t.majority()).collect()
                } else {
                    train
                };
                mode(&basis).map(|ek| {
                    let inputs: Vec<usize> = members.iter().filter_map(|t| t.majority()).collect();
                    (inputs.iter().filter(|&&m| m == ek).count(), inputs.len())
                })
            }
            Grouping::Same => {
                let train: BTreeMap<&str, usize> = members
                    .iter()
                    .filter(|t| t.role == TraceRole::Train)
                    .filter_map(|t| t.majority().map(|m| (t.record_id.as_str(), m)))
                    .collect();
                let mut hit = 0;
                let mut total = 0;
                for t in members.iter().filter(|t| t.role == TraceRole::Test) {
                    if let (Some(&ek), Some(m)) = (train.get(t.record_id.as_str()), t.majority()) {
                        total += 1;
                        hit += usize::from(m == ek);
                    }
                }
                (total > 0).then_some((hit, total))
            }
        };
        match scored {
            Some((hit, total)) if total > 0 => {
                per_group.insert(g.to_owned(), hit as f64 / total as f64);
            }
            _ => excluded.push(g.to_owned()),
        }
    }
    if per_group.is_empty() {
        return Err(Error::EmptyInput("consistency groups"));
    }
    let overall = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok(ConsistencyReport {
        overall,
        per_group,
        excluded,
    })
}

/// Top-1 selections per expert over every token of every trace.
pub fn utilization_histogram(traces: &[RoutingTrace], num_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_experts];
    for t in traces {
        for &e in &t.experts {
            *counts.get_mut(e).ok_or_else(|| {
                Error::InvalidArgument(format!("expert index {e} out of range for {num_experts} experts"))
            })? += 1;
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    /// Cluster per point, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Sum of cosine distances to the assigned centroid, after each
    /// assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine distance `1 − cos(a, b)` of two vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(&normalized(a), &normalized(b))
}

/// Spherical k-means: points and centroids live on the unit sphere, points
/// join the centroid of highest cosine similarity, and centroids are
/// renormalized means. Seeded with k-means++ from the seed's `kmeans`
/// stream.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!("k={k} exceeds {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument("points differ in dimension".into()));
    }
    let x: Vec<Vec<f64>> = points.iter().map(|p| normalized(p)).collect();
    let mut rng = rng::stream(seed, "kmeans");

    let mut centroids = vec![x[rng.gen_range(0..x.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = x
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| (1.0 - dot(p, c)).max(0.0))
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..x.len())
        };
        centroids.push(x[pick].clone());
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut obj = 0.0;
        let labels = x
            .iter()
            .map(|p| {
                let (best, sim) = centroids
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, dot(p, c)))
                    .fold((0, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
                obj += 1.0 - sim;
                best
            })
            .collect();
        (labels, obj)
    };

    let mut objective = Vec::new();
    let mut iterations = 0;
    let (mut labels, obj) = assign(&centroids);
    objective.push(obj);
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut moved: f64 = 0.0;
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; dim];
            let mut n = 0;
            for (p, &l) in x.iter().zip(&labels) {
                if l == j {
                    n += 1;
                    for (s, v) in sum.iter_mut().zip(p) {
                        *s += v;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let next = normalized(&sum);
            moved = moved.max(next.iter().zip(c.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            *c = next;
        }
        let (l, obj) = assign(&centroids);
        labels = l;
        objective.push(obj);
        if moved < KMEANS_TOL {
            break;
        }
    }

    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let labels = labels
        .into_iter()
        .map(|l| {
            let next = remap.len();
            *remap.entry(l).or_insert(next)
        })
        .collect();
    Ok(KMeans {
        labels,
        objective,
        iterations,
    })
}

/// Clusters inputs by their mean-pooled token embeddings.
pub fn kmeans_groups(contexts: &[RoutingContext], k: usize, seed: u64) -> Result<Vec<usize>> {
    let points: Vec<Vec<f64>> = contexts.iter().map(|c| c.sentence.clone()).collect();
    Ok(kmeans(&points, k, seed)?.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub num_experts: usize,
    pub top_k: usize,
    pub target_layer: usize,
    pub lambda: f64,
    pub routing: String,
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub average: f64,
    pub consistency_similar: Option<f64>,
    pub consistency_same: Option<f64>,
    pub expert_histogram: Vec<usize>,
    pub num_records: usize,
}

/// CSV schema shared by edit and ablation outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub mode: String,
    pub seed: u64,
    #[serde(rename = "E")]
    pub experts: usize,
    pub k: usize,
    pub layer: usize,
    pub lambda: f64,
    pub routing: String,
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub average: f64,
    pub consistency_similar: Option<f64>,
    pub consistency_same: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "mode",
    "seed",
    "E",
    "k",
    "layer",
    "lambda",
    "routing",
    "reliability",
    "generality",
    "locality",
    "average",
    "consistency_similar",
    "consistency_same",
];

impl MetricsReport {
    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            mode: self.mode.clone(),
            seed: self.seed,
            experts: self.num_experts,
            k: self.top_k,
            layer: self.target_layer,
            lambda: self.lambda,
            routing: self.routing.clone(),
            reliability: self.reliability,
            generality: self.generality,
            locality: self.locality,
            average: self.average,
            consistency_similar: self.consistency_similar,
            consistency_same: self.consistency_same,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self.csv_row()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
