//! Synthetic fact corpus shaped like ZsRE: pre-edit facts for base
//! training, counterfactual edit records, a gazetteer, and relation groups.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::anchor::Gazetteer;
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelSnapshot};
use crate::rng;
use crate::vocab::{tokenize, Vocab};

/// Continuation length used for locality ground truth.
pub const LOCALITY_MAX_NEW: usize = 3;

struct Relation {
    name: &'static str,
    templates: [&'static str; 3],
}

const RELATIONS: [Relation; 5] = [
    Relation {
        name: "capital",
        templates: [
            "the capital of {s} is",
            "which city is the capital of {s} ?",
            "{s} has its capital in",
        ],
    },
    Relation {
        name: "leader",
        templates: ["the leader of {s} is", "who leads {s} ?", "{s} is led by"],
    },
    Relation {
        name: "language",
        templates: [
            "the language of {s} is",
            "what language is spoken in {s} ?",
            "people in {s} speak",
        ],
    },
    Relation {
        name: "currency",
        templates: [
            "the currency of {s} is",
            "what money is used in {s} ?",
            "{s} pays with",
        ],
    },
    Relation {
        name: "sport",
        templates: [
            "the favorite sport of {s} is",
            "which sport is loved in {s} ?",
            "{s} likes to play",
        ],
    },
];

const PREFIXES: [&str; 4] = ["north", "south", "new", "upper"];

fn fill(template: &str, subject: &str) -> String {
    template.replace("{s}", subject)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Number of edit records; the same number of background facts is
    /// generated for locality probes.
    pub num_facts: usize,
    pub num_relations: usize,
    /// Candidate objects per relation.
    pub entities_per_relation: usize,
    /// Templates per relation beyond the edit template (1 or 2).
    pub rephrases_per_fact: usize,
    pub seed: u64,
    /// Word pool for entity names.
    pub vocab: Vec<String>,
}

impl CorpusSpec {
    pub fn desk(num_facts: usize, seed: u64) -> Self {
        Self {
            num_facts,
            num_relations: 5,
            entities_per_relation: 8,
            rephrases_per_fact: 2,
            seed,
            vocab: default_word_pool(),
        }
    }

    /// Pool words needed: subjects for edit and background facts plus the
    /// object candidates.
    pub fn required_words(&self) -> usize {
        2 * self.num_facts + self.num_relations * self.entities_per_relation
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_facts == 0 {
            return Err(Error::Config("num_facts must be at least 1".into()));
        }
        if self.num_relations == 0 || self.num_relations > RELATIONS.len() {
            return Err(Error::Config(format!(
                "num_relations must be in 1..={}",
                RELATIONS.len()
            )));
        }
        if self.entities_per_relation < 2 {
            return Err(Error::Config("entities_per_relation must be at least 2".into()));
        }
        if self.rephrases_per_fact == 0 || self.rephrases_per_fact > 2 {
            return Err(Error::Config("rephrases_per_fact must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Pronounceable consonant-vowel-consonant-vowel words, in a fixed order.
pub fn default_word_pool() -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut out = Vec::new();
    for &c1 in C {
        for &v1 in V {
            for &c2 in C {
                for &v2 in V {
                    out.push(String::from_utf8(vec![c1, v1, c2, v2]).expect("ascii"));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub record_id: String,
    pub subject: String,
    pub prompt: String,
    pub target_new: String,
    pub rephrase_prompt: String,
    pub locality_prompt: String,
    /// The base model's greedy output on `locality_prompt`.
    pub locality_ground_truth: Vec<usize>,
    pub group_id: String,
}

const RECORD_FIELDS: [&str; 8] = [
    "record_id",
    "subject",
    "prompt",
    "target_new",
    "rephrase_prompt",
    "locality_prompt",
    "locality_ground_truth",
    "group_id",
];

/// A pre-edit fact the base model is trained on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    /// Whether an edit record targets this fact.
    pub edited: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Fact sentences (prompt followed by object), one per fact and template.
    pub pretrain: Vec<String>,
    pub facts: Vec<Fact>,
    pub records: Vec<EditRecord>,
    pub gazetteer: Gazetteer,
    pub vocab: Vocab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub num_records: usize,
    pub num_pretrain: usize,
    pub gazetteer_entries: usize,
    pub vocab_size: usize,
    pub groups: BTreeMap<String, usize>,
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut reserved: BTreeSet<String> = PREFIXES.iter().map(|s| s.to_string()).collect();
    for r in &RELATIONS {
        for t in r.templates {
            reserved.extend(tokenize(t));
        }
    }
    let mut pool: Vec<String> = spec
        .vocab
        .iter()
        .map(|w| w.trim().to_lowercase())
        .filter(|w| !w.is_empty() && !w.contains(char::is_whitespace) && !reserved.contains(w))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let required = spec.required_words();
    if pool.len() < required {
        return Err(Error::InsufficientVocab {
            required,
            available: pool.len(),
        });
    }

    let mut rng = rng::stream(spec.seed, "data");
    pool.shuffle(&mut rng);
    let mut words = pool.into_iter();
    let relations = &RELATIONS[..spec.num_relations];
    let objects: Vec<Vec<String>> = relations
        .iter()
        .map(|_| words.by_ref().take(spec.entities_per_relation).collect())
        .collect();
    let mut subject = |rng: &mut rng::Rng| {
        let w = words.next().expect("pool size checked");
        if rng.gen_range(0..4) == 0 {
            format!("{} {w}", PREFIXES[rng.gen_range(0..PREFIXES.len())])
        } else {
            w
        }
    };

    let templates_used = 1 + spec.rephrases_per_fact;
    let mut facts = Vec::with_capacity(2 * spec.num_facts);
    for edited in [true, false] {
        for i in 0..spec.num_facts {
            let r = i % spec.num_relations;
            let s = subject(&mut rng);
            let o = objects[r][rng.gen_range(0..spec.entities_per_relation)].clone();
            facts.push(Fact {
                subject: s,
                relation: relations[r].name.to_owned(),
                object: o,
                edited,
            });
        }
    }

    let mut records = Vec::with_capacity(spec.num_facts);
    for i in 0..spec.num_facts {
        let r = i % spec.num_relations;
        let fact = &facts[i];
        // Background fact of the next relation family.
        let b = (i + 1) % spec.num_facts;
        let background = &facts[spec.num_facts + b];
        let tpl = &relations[r].templates[..templates_used];
        let loc_tpl = &relations[b % spec.num_relations].templates[..templates_used];
        let edit_t = rng.gen_range(0..templates_used);
        let reph_t = (edit_t + 1 + rng.gen_range(0..templates_used - 1)) % templates_used;
        let loc_t = rng.gen_range(0..templates_used);
        let alternatives: Vec<&String> = objects[r].iter().filter(|o| **o != fact.object).collect();
        let target = alternatives[rng.gen_range(0..alternatives.len())].clone();
        records.push(EditRecord {
            record_id: format!("r{i:04}"),
            subject: fact.subject.clone(),
            prompt: fill(tpl[edit_t], &fact.subject),
            target_new: target,
            rephrase_prompt: fill(tpl[reph_t], &fact.subject),
            locality_prompt: fill(loc_tpl[loc_t], &background.subject),
            locality_ground_truth: Vec::new(),
            group_id: fact.relation.clone(),
        });
    }

    let mut pretrain = Vec::with_capacity(facts.len() * templates_used);
    for f in &facts {
        let rel = relations.iter().find(|r| r.name == f.relation).expect("known relation");
        for t in &rel.templates[..templates_used] {
            pretrain.push(format!("{} {}", fill(t, &f.subject), f.object));
        }
    }

    let gazetteer = Gazetteer::new(
        facts
            .iter()
            .enumerate()
            .map(|(i, f)| (f.subject.clone(), format!("ent{i:04}"))),
    )?;

    let mut vocab_words: Vec<String> = Vec::new();
    for r in relations {
        for t in &r.templates[..templates_used] {
            vocab_words.extend(tokenize(t).into_iter().filter(|w| w != "{s}"));
        }
    }
    vocab_words.extend(PREFIXES.iter().map(|s| s.to_string()));
    for f in &facts {
        vocab_words.extend(tokenize(&f.subject));
    }
    for objs in &objects {
        vocab_words.extend(objs.iter().cloned());
    }
    let vocab = Vocab::from_words(vocab_words);

    Ok(Corpus {
        spec: spec.clone(),
        pretrain,
        facts,
        records,
        gazetteer,
        vocab,
    })
}

impl Corpus {
    pub fn manifest(&self) -> CorpusManifest {
        let mut groups = BTreeMap::new();
        for r in &self.records {
            *groups.entry(r.group_id.clone()).or_insert(0) += 1;
        }
        CorpusManifest {
            spec: self.spec.clone(),
            num_records: self.records.len(),
            num_pretrain: self.pretrain.len(),
            gazetteer_entries: self.gazetteer.len(),
            vocab_size: self.vocab.len(),
            groups,
        }
    }

    /// Pre-edit object of the fact a record edits.
    pub fn base_object(&self, record: &EditRecord) -> Option<&str> {
        self.facts
            .iter()
            .find(|f| f.edited && f.subject == record.subject)
            .map(|f| f.object.as_str())
    }

    /// Training sequences: every pretrain sentence encoded and closed with
    /// `<eos>`.
    pub fn pretrain_tokens(&self) -> Vec<Vec<usize>> {
        encode_sentences(&self.pretrain, &self.vocab)
    }

    /// Writes `records.jsonl`, `pretrain.txt`, `gazetteer.tsv`, `vocab.txt`
    /// and `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&self.records, &dir.join(RECORDS_FILE))?;
        let mut pre = self.pretrain.join("\n");
        pre.push('\n');
        std::fs::write(dir.join(PRETRAIN_FILE), pre)?;
        self.gazetteer.save(&dir.join(GAZETTEER_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut m = serde_json::to_string_pretty(&self.manifest())?;
        m.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), m)?;
        Ok(())
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const PRETRAIN_FILE: &str = "pretrain.txt";
pub const GAZETTEER_FILE: &str = "gazetteer.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_sentences(sentences: &[String], vocab: &Vocab) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| {
            let mut t = vocab.encode(s);
            t.push(crate::vocab::EOS);
            t
        })
        .collect()
}

pub fn read_pretrain(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_jsonl(records: &[EditRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EditRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        if let Some(f) = RECORD_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::MissingField {
                line: line_no,
                field: (*f).to_owned(),
            });
        }
        if let Some(k) = obj.keys().find(|k| !RECORD_FIELDS.contains(&k.as_str())) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unknown field `{k}`"),
            });
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EditRecord>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// Base-model greedy continuation used as the locality reference.
pub fn locality_reference(prompt: &str, vocab: &Vocab, snapshot: &ModelSnapshot) -> Result<Vec<usize>> {
    greedy_decode(&vocab.encode(prompt), snapshot, None, LOCALITY_MAX_NEW)
}

pub fn attach_locality_ground_truth(
    records: &[EditRecord],
    vocab: &Vocab,
    snapshot: &ModelSnapshot,
) -> Result<Vec<EditRecord>> {
    records
        .iter()
        .map(|r| {
            Ok(EditRecord {
                locality_ground_truth: locality_reference(&r.locality_prompt, vocab, snapshot)?,
                ..r.clone()
            })
        })
        .collect()
}

/// Recomputes every locality reference and rejects records whose stored
/// value disagrees with the base model.
pub fn verify_locality_ground_truth(records: &[EditRecord], vocab: &Vocab, snapshot: &ModelSnapshot) -> Result<()> {
    for r in records {
        let fresh = locality_reference(&r.locality_prompt, vocab, snapshot)?;
        if fresh != r.locality_ground_truth {
            return Err(Error::InvalidArgument(format!(
                "record {}: stored locality ground truth {:?} differs from base output {:?}",
                r.record_id, r.locality_ground_truth, fresh
            )));
        }
    }
    Ok(())
}

/// Group ids in order of first appearance.
pub fn group_order(records: &[EditRecord]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in records {
        if !seen.contains(&r.group_id) {
            seen.push(r.group_id.clone());
        }
    }
    seen
}

/// Takes the first `counts[g]` records of the `g`-th group, groups in
/// order of first appearance.
pub fn mixture_slice(records: &[EditRecord], counts: &[usize]) -> Result<Vec<EditRecord>> {
    let groups = group_order(records);
    if counts.len() > groups.len() {
        return Err(Error::InvalidArgument(format!(
            "{} group counts for {} groups",
            counts.len(),
            groups.len()
        )));
    }
    let mut out = Vec::new();
    for (g, &n) in groups.iter().zip(counts) {
        let members: Vec<&EditRecord> = records.iter().filter(|r| &r.group_id == g).collect();
        if members.len() < n {
            return Err(Error::InvalidArgument(format!(
                "group `{g}` has {} records, {n} requested",
                members.len()
            )));
        }
        out.extend(members.into_iter().take(n).cloned());
    }
    Ok(out)
}
