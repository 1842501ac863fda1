//! TACRED-style corpora: JSONL I/O, statistics, k-shot subsets and a
//! synthetic generator for desk-scale experiments.

mod kshot;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use kshot::{kshot_sample, KShotSpec};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Label used by the TACRED family for "no relation holds".
pub const TACRED_NO_RELATION: &str = "no_relation";
/// SemEval's equivalent of [`TACRED_NO_RELATION`].
pub const SEMEVAL_NO_RELATION: &str = "Other";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {message}")]
    Span { line: usize, message: String },
    #[error("line {line}: unknown split {split:?}")]
    UnknownSplit { line: usize, split: String },
    #[error("k must be positive, got {0}")]
    InvalidK(i64),
    #[error("cannot sample from an empty split")]
    EmptySplit,
    #[error("invalid synthetic corpus request: {0}")]
    InvalidSynthetic(String),
}

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// One labelled sentence with its subject and object mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub subj: Span,
    pub obj: Span,
    pub relation: String,
}

impl Instance {
    /// Checks span bounds and disjointness.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        for (name, span) in [("subj", self.subj), ("obj", self.obj)] {
            if span.start >= span.end || span.end > n {
                return Err(format!("{name} span [{}, {}) invalid for {n} tokens", span.start, span.end));
            }
        }
        if self.subj.overlaps(&self.obj) {
            return Err("subj and obj spans overlap".to_string());
        }
        Ok(())
    }

    pub fn subj_tokens(&self) -> &[String] {
        &self.tokens[self.subj.range()]
    }

    pub fn obj_tokens(&self) -> &[String] {
        &self.tokens[self.obj.range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "dev" | "valid" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    subj: Span,
    obj: Span,
    relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Train/validation/test splits plus the ordered relation inventory.
///
/// The inventory places the no-relation label first, followed by every other
/// relation in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
    relations: Vec<String>,
    no_relation: String,
}

impl Corpus {
    pub fn new(
        train: Vec<Instance>,
        validation: Vec<Instance>,
        test: Vec<Instance>,
        no_relation: &str,
    ) -> Self {
        let mut c = Self { train, validation, test, relations: Vec::new(), no_relation: no_relation.to_string() };
        c.rebuild_inventory();
        c
    }

    /// Builds a corpus with a fixed relation inventory (e.g. when instances
    /// are a subset that may not cover every class).
    pub fn with_relations(
        train: Vec<Instance>,
        validation: Vec<Instance>,
        test: Vec<Instance>,
        no_relation: &str,
        relations: Vec<String>,
    ) -> Self {
        let mut c = Self::new(train, validation, test, no_relation);
        let mut extra: BTreeSet<String> = relations.into_iter().collect();
        extra.extend(c.relations.iter().cloned());
        extra.remove(no_relation);
        c.relations = std::iter::once(no_relation.to_string()).chain(extra).collect();
        c
    }

    fn rebuild_inventory(&mut self) {
        let others: BTreeSet<&str> = self
            .all_instances()
            .map(|i| i.relation.as_str())
            .filter(|r| *r != self.no_relation)
            .collect();
        self.relations = std::iter::once(self.no_relation.clone()).chain(others.into_iter().map(String::from)).collect();
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn no_relation(&self) -> &str {
        &self.no_relation
    }

    /// Index of the no-relation label in [`Corpus::relations`] (always 0).
    pub fn no_relation_index(&self) -> usize {
        0
    }

    pub fn relation_index(&self, relation: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == relation)
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Instance> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn all_instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    /// Loads either a single JSONL file (records routed by their optional
    /// `split` field, default `train`) or a directory holding
    /// `train.jsonl`, `validation.jsonl`/`dev.jsonl` and `test.jsonl`.
    pub fn load(path: &Path, no_relation: &str) -> Result<Self, CorpusError> {
        if path.is_dir() {
            let mut splits: BTreeMap<Split, Vec<Instance>> = BTreeMap::new();
            for (split, names) in [
                (Split::Train, &["train.jsonl"][..]),
                (Split::Validation, &["validation.jsonl", "dev.jsonl", "valid.jsonl"][..]),
                (Split::Test, &["test.jsonl"][..]),
            ] {
                if let Some(file) = names.iter().map(|n| path.join(n)).find(|p| p.is_file()) {
                    splits.insert(split, load_jsonl(&file)?);
                }
            }
            let mut take = |s| splits.remove(&s).unwrap_or_default();
            let (train, validation, test) = (take(Split::Train), take(Split::Validation), take(Split::Test));
            return Ok(Self::new(train, validation, test, no_relation));
        }
        let mut corpus = Self::new(Vec::new(), Vec::new(), Vec::new(), no_relation);
        for (split, inst) in read_records(path)? {
            corpus.split_mut(split).push(inst);
        }
        corpus.rebuild_inventory();
        Ok(corpus)
    }

    /// Writes every split into one JSONL file, tagging each record with its split.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for split in Split::ALL {
            for inst in self.split(split) {
                writeln!(w, "{}", record_line(inst, Some(split))).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

fn record_line(inst: &Instance, split: Option<Split>) -> String {
    let rec = Record {
        tokens: inst.tokens.clone(),
        subj: inst.subj,
        obj: inst.obj,
        relation: inst.relation.clone(),
        split: split.map(|s| s.name().to_string()),
    };
    serde_json::to_string(&rec).expect("record serialises")
}

fn read_records(path: &Path) -> Result<Vec<(Split, Instance)>, CorpusError> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
        let split = match rec.split.as_deref() {
            None => Split::Train,
            Some(s) => Split::parse(s).ok_or_else(|| CorpusError::UnknownSplit { line: line_no, split: s.to_string() })?,
        };
        let inst = Instance { tokens: rec.tokens, subj: rec.subj, obj: rec.obj, relation: rec.relation };
        inst.validate().map_err(|message| CorpusError::Span {
            line: line_no,
            message: format!("instance {:?}: {message}", inst.tokens.join(" ")),
        })?;
        out.push((split, inst));
    }
    Ok(out)
}

/// Reads one split: one JSON object per line with `tokens`, `subj`, `obj`
/// and `relation`. Blank lines are skipped; errors carry 1-based line numbers.
pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>, CorpusError> {
    Ok(read_records(path)?.into_iter().map(|(_, i)| i).collect())
}

/// Writes one split in the format read by [`load_jsonl`].
pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for inst in instances {
        writeln!(w, "{}", record_line(inst, None)).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Size of the relation inventory, no-relation included.
    pub relations: usize,
    /// Instance count per relation over all splits; relations with no
    /// instances are omitted.
    pub histogram: BTreeMap<String, usize>,
}

pub fn dataset_stats(corpus: &Corpus) -> DatasetStats {
    let mut histogram = BTreeMap::new();
    for inst in corpus.all_instances() {
        *histogram.entry(inst.relation.clone()).or_insert(0) += 1;
    }
    DatasetStats {
        train: corpus.train.len(),
        validation: corpus.validation.len(),
        test: corpus.test.len(),
        relations: corpus.relations().len(),
        histogram,
    }
}
