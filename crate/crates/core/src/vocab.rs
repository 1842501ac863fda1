//! Word-level vocabulary with one extra token per relation label.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::corpus::Corpus;
use crate::scalar::Scalar;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("label tokens already added")]
    LabelsAlreadyAdded,
    #[error("vocabulary file holds {found} label tokens but {expected} relations were given")]
    LabelCountMismatch { found: usize, expected: usize },
    #[error("vocabulary file is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("embedding table has {rows} rows, vocabulary needs {needed}")]
    TableTooSmall { rows: usize, needed: usize },
}

/// A relation class together with its label token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLabel {
    pub index: usize,
    pub text: String,
    pub sub_texts: Vec<String>,
    /// Base-vocabulary ids of `sub_texts`; unknown pieces map to `[UNK]`.
    pub sub_text_ids: Vec<usize>,
    /// Pieces absent from the base vocabulary.
    pub unknown: Vec<String>,
    pub token_id: usize,
}

/// Splits a relation label on `:`, `_` and `/`, dropping empty pieces and lowercasing.
pub fn decompose_label(text: &str) -> Vec<String> {
    text.split([':', '_', '/']).filter(|p| !p.is_empty()).map(str::to_lowercase).collect()
}

/// Surface form of the `i`-th label token (0-based `i`, 1-based name).
pub fn label_token_name(i: usize) -> String {
    format!("[C{}]", i + 1)
}

/// Surface form of the `i`-th relation-free learnable token.
pub fn learnable_token_name(i: usize) -> String {
    format!("[L{}]", i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    base_size: usize,
    relations: Vec<RelationLabel>,
    learnable: Vec<usize>,
}

impl Vocabulary {
    /// Special tokens followed by `words` (lowercased, deduplicated, sorted).
    pub fn from_words<I, W>(words: I) -> Self
    where
        I: IntoIterator<Item = W>,
        W: AsRef<str>,
    {
        let words: BTreeSet<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let base_size = tokens.len();
        Self { tokens, index, base_size, relations: Vec::new(), learnable: Vec::new() }
    }

    /// Base vocabulary from every sentence token and every label sub-text of
    /// `corpus`, extended with one label token per relation.
    pub fn build(corpus: &Corpus) -> Self {
        let sentence_words = corpus.all_instances().flat_map(|i| i.tokens.iter().cloned());
        let label_words = corpus.relations().iter().flat_map(|r| decompose_label(r));
        let mut vocab = Self::from_words(sentence_words.chain(label_words));
        vocab.add_label_tokens(corpus.relations()).expect("fresh vocabulary");
        vocab
    }

    /// Appends `[C1]…[Cm]`, one per relation, after the base vocabulary.
    pub fn add_label_tokens<S: AsRef<str>>(&mut self, relations: &[S]) -> Result<(), VocabError> {
        if !self.relations.is_empty() || self.tokens.len() != self.base_size {
            return Err(VocabError::LabelsAlreadyAdded);
        }
        for (i, rel) in relations.iter().enumerate() {
            let text = rel.as_ref().to_string();
            let sub_texts = decompose_label(&text);
            let mut sub_text_ids = Vec::with_capacity(sub_texts.len());
            let mut unknown = Vec::new();
            for piece in &sub_texts {
                match self.index.get(piece) {
                    Some(&id) if id < self.base_size => sub_text_ids.push(id),
                    _ => {
                        sub_text_ids.push(self.unk());
                        unknown.push(piece.clone());
                    }
                }
            }
            if sub_texts.is_empty() {
                sub_text_ids.push(self.unk());
            }
            let token_id = self.push_token(label_token_name(i));
            self.relations.push(RelationLabel { index: i, text, sub_texts, sub_text_ids, unknown, token_id });
        }
        Ok(())
    }

    /// Appends `[L1]…[Lm]`, tokens tied to no relation, for the learnable-token
    /// template variant. Idempotent.
    pub fn add_learnable_tokens(&mut self) {
        if !self.learnable.is_empty() {
            return;
        }
        for i in 0..self.relations.len() {
            let id = self.push_token(learnable_token_name(i));
            self.learnable.push(id);
        }
    }

    fn push_token(&mut self, tok: String) -> usize {
        let id = self.tokens.len();
        self.index.insert(tok.clone(), id);
        self.tokens.push(tok);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relations(&self) -> &[RelationLabel] {
        &self.relations
    }

    pub fn relation_index(&self, text: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.text == text)
    }

    pub fn label_token_ids(&self) -> Vec<usize> {
        self.relations.iter().map(|r| r.token_id).collect()
    }

    pub fn learnable_token_ids(&self) -> &[usize] {
        &self.learnable
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn unk(&self) -> usize {
        1
    }
    pub fn cls(&self) -> usize {
        2
    }
    pub fn sep(&self) -> usize {
        3
    }
    pub fn mask(&self) -> usize {
        4
    }

    /// Id of one surface word, lowercased; `[UNK]` when absent.
    pub fn word_id(&self, word: &str) -> usize {
        match self.index.get(&word.to_lowercase()) {
            Some(&id) if id < self.base_size => id,
            _ => self.unk(),
        }
    }

    /// Lowercased whitespace tokenisation.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Inverse of [`Vocabulary::to_text`]. `relations` must list the relation
    /// texts in label-token order.
    pub fn from_text<S: AsRef<str>>(text: &str, relations: &[S]) -> Result<Self, VocabError> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(VocabError::MissingSpecial(special));
            }
        }
        let base_size = lines.iter().position(|l| *l == label_token_name(0)).unwrap_or(lines.len());
        let found = lines[base_size..].iter().filter(|l| l.starts_with("[C")).count();
        if found != relations.len() {
            return Err(VocabError::LabelCountMismatch { found, expected: relations.len() });
        }
        let mut vocab = Self::from_words(std::iter::empty::<&str>());
        vocab.tokens = lines.iter().map(|l| l.to_string()).collect::<Vec<_>>()[..base_size].to_vec();
        vocab.index = vocab.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        vocab.base_size = base_size;
        vocab.add_label_tokens(relations)?;
        if lines.len() > base_size + found {
            vocab.add_learnable_tokens();
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        fs::write(path, self.to_text()).map_err(|source| VocabError::Io { path: path.display().to_string(), source })
    }

    pub fn load<S: AsRef<str>>(path: &Path, relations: &[S]) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)
            .map_err(|source| VocabError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text, relations)
    }
}

/// Mean of the sub-text embedding rows of `label`.
pub fn label_embedding<S: Scalar>(label: &RelationLabel, table: &Tensor<S>) -> Vec<S> {
    let d = table.cols();
    let mut mean = vec![S::zero(); d];
    for &id in &label.sub_text_ids {
        mean.iter_mut().zip(table.row_slice(id)).for_each(|(m, &x)| *m += x);
    }
    let n = S::from_usize(label.sub_text_ids.len()).expect("count fits scalar");
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Writes the mean sub-text embedding into the label token's row and
/// returns it. Falls back to the `[UNK]` row (with a warning) when no piece
/// is in the base vocabulary.
pub fn init_label_embedding<S: Scalar>(
    label: &RelationLabel,
    table: &mut Tensor<S>,
) -> Result<Vec<S>, VocabError> {
    if table.rows() <= label.token_id {
        return Err(VocabError::TableTooSmall { rows: table.rows(), needed: label.token_id + 1 });
    }
    if label.unknown.len() == label.sub_texts.len() {
        log::warn!("relation {:?}: no sub-text in vocabulary, using [UNK] embedding", label.text);
    }
    let v = label_embedding(label, table);
    table.row_slice_mut(label.token_id).copy_from_slice(&v);
    Ok(v)
}

/// Initialises every label token row of `table`.
pub fn init_label_embeddings<S: Scalar>(vocab: &Vocabulary, table: &mut Tensor<S>) -> Result<(), VocabError> {
    for label in vocab.relations() {
        init_label_embedding(label, table)?;
    }
    Ok(())
}
