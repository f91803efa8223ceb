//! Knowledge anchors: gazetteer entity matching and pooled anchor
//! embeddings for routing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::vocab::{tokenize, Vocab};

/// Surface forms (lowercased token sequences) mapped to entity ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, String>,
    /// Lexicographically smallest surface form of each id, used for embeddings.
    canonical: BTreeMap<String, Vec<String>>,
    longest: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    /// Token index of the first matched token.
    pub start: usize,
    /// One past the last matched token.
    pub end: usize,
    pub entity: String,
}

impl Gazetteer {
    pub fn new<I, S, T>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: Into<String>,
    {
        let mut g = Self::default();
        for (surface, id) in entries {
            g.insert(surface.as_ref(), id.into())?;
        }
        Ok(g)
    }

    fn insert(&mut self, surface: &str, id: String) -> Result<()> {
        let key = tokenize(surface);
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!("empty surface form for entity `{id}`")));
        }
        if let Some(prev) = self.entries.get(&key) {
            if *prev != id {
                return Err(Error::InvalidArgument(format!(
                    "surface `{surface}` maps to both `{prev}` and `{id}`"
                )));
            }
            return Ok(());
        }
        self.longest = self.longest.max(key.len());
        match self.canonical.get(&id) {
            Some(existing) if *existing <= key => {}
            _ => {
                self.canonical.insert(id.clone(), key.clone());
            }
        }
        self.entries.insert(key, id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn longest_entry_len(&self) -> usize {
        self.longest
    }

    /// Entity ids in sorted order.
    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.canonical.keys().map(String::as_str)
    }

    pub fn lookup(&self, surface: &str) -> Option<&str> {
        self.entries.get(&tokenize(surface)).map(String::as_str)
    }

    /// Tokens of the surface form used to embed `id`.
    pub fn canonical_tokens(&self, id: &str) -> Option<&[String]> {
        self.canonical.get(id).map(Vec::as_slice)
    }

    /// Entries sorted by surface form, as `(surface, id)`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .entries
            .iter()
            .map(|(k, v)| (k.join(" "), v.clone()))
            .collect();
        out.sort();
        out
    }

    /// Parses `surface<TAB>id` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut g = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (surface, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `surface<TAB>entity-id`".into(),
            })?;
            let id = id.trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty entity id".into(),
                });
            }
            g.insert(surface, id.to_owned()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(g)
    }

    pub fn to_tsv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(s, id)| format!("{s}\t{id}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Greedy left-to-right longest-match scan over the tokenized text.
pub fn extract_entities(text: &str, g: &Gazetteer) -> Vec<Span> {
    extract_from_tokens(&tokenize(text), g)
}

pub fn extract_from_tokens(tokens: &[String], g: &Gazetteer) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let max = g.longest.min(tokens.len() - i);
        let hit = (1..=max)
            .rev()
            .find_map(|n| g.entries.get(&tokens[i..i + n]).map(|id| (n, id)));
        match hit {
            Some((n, id)) => {
                spans.push(Span {
                    start: i,
                    end: i + n,
                    entity: id.clone(),
                });
                i += n;
            }
            None => i += 1,
        }
    }
    spans
}

/// Entity embeddings keyed by entity id.
pub type EntityEmbeddings = BTreeMap<String, Vec<f64>>;

/// Embeds every gazetteer entity as the mean token embedding of its
/// canonical surface form in the frozen base model.
pub fn entity_embeddings(g: &Gazetteer, vocab: &Vocab, snapshot: &ModelSnapshot) -> Result<EntityEmbeddings> {
    let d = snapshot.config().d_model;
    let mut out = EntityEmbeddings::new();
    for (id, words) in &g.canonical {
        let mut acc = vec![0.0; d];
        for w in words {
            let t = vocab
                .id(w)
                .ok_or_else(|| Error::UnknownEntity(format!("word `{w}` of entity `{id}` is not in the vocabulary")))?;
            let e = snapshot.token_embedding(t).ok_or(Error::TokenOutOfRange {
                token: t,
                vocab: snapshot.config().vocab_size,
            })?;
            for (a, v) in acc.iter_mut().zip(e) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= words.len() as f64);
        out.insert(id.clone(), acc);
    }
    Ok(out)
}

/// Elementwise mean of the spans' entity embeddings; the zero vector when
/// there are no spans.
pub fn anchor_embedding(spans: &[Span], table: &EntityEmbeddings, d_model: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d_model];
    for s in spans {
        let e = table
            .get(&s.entity)
            .ok_or_else(|| Error::UnknownEntity(s.entity.clone()))?;
        if e.len() != d_model {
            return Err(Error::ShapeMismatch {
                op: "anchor_embedding",
                left: vec![d_model],
                right: vec![e.len()],
            });
        }
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v;
        }
    }
    if !spans.is_empty() {
        acc.iter_mut().for_each(|a| *a /= spans.len() as f64);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub spans: Vec<Span>,
    pub embedding: Vec<f64>,
}

impl AnchorSet {
    pub fn extract(text: &str, g: &Gazetteer, table: &EntityEmbeddings, d_model: usize) -> Result<Self> {
        let spans = extract_entities(text, g);
        let embedding = anchor_embedding(&spans, table, d_model)?;
        Ok(Self { spans, embedding })
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}
