//! Label sentences, frozen label embeddings and multi-hot targets.
//!
//! Labels are rewritten into short English sentences before a language model
//! embeds them. Context labels describe where the phone is, state activities
//! what the user is doing, and short-term actions (names ending in
//! `(action)` or `(a)`) get a trailing "now".

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Instance, LabelGroup, LabelSchema};
use crate::error::{Error, Result};
use crate::rng::mix64;

const ACTION_SUFFIXES: [&str; 2] = ["(action)", "(a)"];

fn strip_action_suffix(label: &str) -> Option<&str> {
    let trimmed = label.trim_end();
    ACTION_SUFFIXES.iter().find_map(|suffix| {
        let lower = trimmed.to_ascii_lowercase();
        lower
            .ends_with(suffix)
            .then(|| trimmed[..trimmed.len() - suffix.len()].trim_end())
    })
}

fn phrase(label: &str) -> String {
    let lower = label.trim().to_lowercase();
    // "talking on phone" -> "talking on the phone"
    lower.replace(" on phone", " on the phone")
}

fn context_sentence(label: &str) -> String {
    let p = phrase(label);
    let placement = if let Some(rest) = p.strip_prefix("in ") {
        format!("in their {rest}")
    } else if let Some(rest) = p.strip_prefix("on ") {
        format!("on the {rest}")
    } else {
        p
    };
    format!("The user has a phone {placement}.")
}

fn activity_sentence(label: &str) -> String {
    if let Some(action) = strip_action_suffix(label) {
        return format!("The user is {} now.", phrase(action));
    }
    let p = phrase(label);
    let first = p.split([' ', '-']).next().unwrap_or("");
    if first.ends_with("ing") {
        format!("The user is {p}.")
    } else {
        format!("The user is in the {p}.")
    }
}

/// Label -> sentence, built from the default templates plus user overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateTable {
    sentences: BTreeMap<String, String>,
}

impl TemplateTable {
    /// Default sentences for every schema label. Fails if two labels map to
    /// the same sentence.
    pub fn for_schema(schema: &LabelSchema) -> Result<Self> {
        Self::with_overrides(schema, &BTreeMap::new())
    }

    pub fn with_overrides(schema: &LabelSchema, overrides: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(unknown) = overrides.keys().find(|k| !schema.contains(k)) {
            return Err(Error::SchemaMismatch(format!(
                "template override for unknown label `{unknown}`"
            )));
        }
        let mut sentences = BTreeMap::new();
        let mut used: HashMap<String, String> = HashMap::new();
        for label in schema.labels() {
            let sentence = match overrides.get(label) {
                Some(s) => s.clone(),
                None => match schema.group_of(label) {
                    Some(LabelGroup::Context) => context_sentence(label),
                    _ => activity_sentence(label),
                },
            };
            if let Some(other) = used.insert(sentence.clone(), label.to_string()) {
                return Err(Error::Schema(format!(
                    "labels `{other}` and `{label}` share the sentence \"{sentence}\""
                )));
            }
            sentences.insert(label.to_string(), sentence);
        }
        Ok(TemplateTable { sentences })
    }

    /// Reads overrides from a JSON object mapping label to sentence.
    pub fn from_override_file(schema: &LabelSchema, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overrides: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::with_overrides(schema, &overrides)
    }

    pub fn get(&self, label: &str) -> Option<&str> {
        self.sentences.get(label).map(String::as_str)
    }
}

pub fn rewrite_label(label: &str, table: &TemplateTable) -> Result<String> {
    table
        .get(label)
        .map(str::to_string)
        .ok_or_else(|| Error::SchemaMismatch(format!("unknown label `{label}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub label: String,
    pub sentence: String,
    pub embedding: Vec<f64>,
}

/// Frozen label embeddings, one row per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    label: String,
    sentence: String,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

impl LabelEmbeddingTable {
    pub fn new(rows: Vec<EmbeddingRow>, source: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.embedding.len());
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding table needs non-empty rows".into()));
        }
        let mut seen = HashSet::new();
        for row in &rows {
            if row.embedding.len() != dim {
                return Err(Error::Dimension(format!(
                    "label `{}` has {} values, expected {dim}",
                    row.label,
                    row.embedding.len()
                )));
            }
            if !seen.insert(row.label.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate label `{}`", row.label)));
            }
            if row.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite embedding for `{}`", row.label)));
            }
        }
        Ok(LabelEmbeddingTable {
            dim,
            rows,
            source: source.into(),
        })
    }

    pub fn get(&self, label: &str) -> Option<&EmbeddingRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Checks that every schema label has an embedding.
    pub fn check_covers(&self, schema: &LabelSchema) -> Result<()> {
        match schema.labels().find(|l| self.get(l).is_none()) {
            Some(missing) => Err(Error::SchemaMismatch(format!(
                "embedding table has no row for label `{missing}`"
            ))),
            None => Ok(()),
        }
    }

    /// Embeddings in schema order (contexts then activities), row-major.
    pub fn matrix_for(&self, schema: &LabelSchema) -> Result<Vec<f64>> {
        self.check_covers(schema)?;
        Ok(schema
            .labels()
            .flat_map(|l| self.get(l).unwrap().embedding.iter().copied())
            .collect())
    }

    /// Builds a table with the fallback embedder for every schema label.
    pub fn fallback(templates: &TemplateTable, schema: &LabelSchema, dim: usize, seed: u64) -> Result<Self> {
        let rows = schema
            .labels()
            .map(|label| {
                let sentence = rewrite_label(label, templates)?;
                let embedding = fallback_embed(&sentence, dim, seed)?;
                Ok(EmbeddingRow {
                    label: label.to_string(),
                    sentence,
                    embedding,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, format!("fallback-trigram(dim={dim},seed={seed})"))
    }

    /// Writes JSON Lines; floats use shortest round-trip formatting.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for row in &self.rows {
            let line = EmbeddingLine {
                label: row.label.clone(),
                sentence: row.sentence.clone(),
                embedding: row.embedding.clone(),
                source: Some(self.source.clone()),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a JSON Lines embedding file without schema validation.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut source = None;
        let mut dim = None;
        let mut seen = HashSet::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
            let expected = *dim.get_or_insert(parsed.embedding.len());
            if parsed.embedding.len() != expected {
                return Err(Error::Dimension(format!(
                    "{}: line {lineno} has {} values, expected {expected}",
                    path.display(),
                    parsed.embedding.len()
                )));
            }
            if !seen.insert(parsed.label.clone()) {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: duplicate label `{}`", parsed.label),
                ));
            }
            if source.is_none() {
                source = parsed.source.clone();
            }
            rows.push(EmbeddingRow {
                label: parsed.label,
                sentence: parsed.sentence,
                embedding: parsed.embedding,
            });
        }
        if rows.is_empty() {
            return Err(Error::format(path, "no embeddings"));
        }
        Self::new(rows, source.unwrap_or_else(|| format!("file:{}", path.display())))
    }
}

/// Reads an embedding file and checks that it covers the schema.
pub fn load_embedding_table(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<LabelEmbeddingTable> {
    let table = LabelEmbeddingTable::load_unchecked(path)?;
    table.check_covers(schema)?;
    Ok(table)
}

fn trigram_hash(trigram: &[u8], seed: u64) -> u64 {
    // FNV-1a over the bytes, then a SplitMix finalizer keyed by the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in trigram {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h ^ mix64(seed))
}

/// Deterministic stand-in for a language model: signed hashing of byte
/// trigrams (ASCII-lowercased, padded with boundary markers) into `dim`
/// buckets, L2-normalised.
pub fn fallback_embed(sentence: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be at least 1".into()));
    }
    if sentence.is_empty() {
        return Err(Error::InvalidArgument("cannot embed an empty sentence".into()));
    }
    let mut bytes = vec![0x02u8];
    bytes.extend(sentence.bytes().map(|b| b.to_ascii_lowercase()));
    bytes.push(0x03);
    let mut v = vec![0.0; dim];
    for tri in bytes.windows(3) {
        let h = trigram_hash(tri, seed);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical(format!(
            "trigram counts cancel for \"{sentence}\"; try another seed or dim"
        )));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// One-hot context and multi-hot activities in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoding {
    pub context: Vec<f64>,
    pub activities: Vec<f64>,
}

impl TargetEncoding {
    pub fn context_index(&self) -> Option<usize> {
        self.context.iter().position(|&v| v == 1.0)
    }
}

pub fn encode_targets(instance: &Instance, schema: &LabelSchema) -> Result<TargetEncoding> {
    if let Some(bad) = instance.targets.iter().find(|t| !schema.contains(t)) {
        return Err(Error::SchemaMismatch(format!(
            "instance `{}` has label `{bad}` outside the schema",
            instance.instance_id
        )));
    }
    let context: Vec<f64> = schema
        .contexts
        .iter()
        .map(|c| f64::from(u8::from(instance.targets.contains(c))))
        .collect();
    if context.iter().sum::<f64>() > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "instance `{}` has more than one context label",
            instance.instance_id
        )));
    }
    let activities = schema
        .activities
        .iter()
        .map(|a| f64::from(u8::from(instance.targets.contains(a))))
        .collect();
    Ok(TargetEncoding { context, activities })
}
