//! Prompt construction:
//! `[CLS] c₁ … c_m [SEP] subj [MASK] obj [SEP] sentence [SEP]`.

use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Span};
use crate::vocab::Vocabulary;

pub const DEFAULT_MAX_LEN: usize = 160;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prompt,
    Sentence,
}

/// What occupies the label slots of the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenStrategy {
    /// One relation-specific label token per slot.
    #[default]
    Label,
    /// Every slot holds `[MASK]`.
    Mask,
    /// Every slot holds a distinct learnable token tied to no relation.
    Learnable,
}

impl std::str::FromStr for TokenStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label" => Ok(Self::Label),
            "mask" => Ok(Self::Mask),
            "learnable" => Ok(Self::Learnable),
            other => Err(format!("unknown token strategy {other:?} (expected label, mask or learnable)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("prompt length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("relation {0:?} not in vocabulary")]
    UnknownRelation(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("vocabulary has no learnable tokens; call add_learnable_tokens first")]
    NoLearnableTokens,
    #[error("position {position} out of range for length {len}")]
    OutOfRange { position: usize, len: usize },
}

/// Assembled model input with every position the losses need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEncoding {
    pub ids: Vec<usize>,
    pub segments: Vec<Segment>,
    pub mask_pos: usize,
    pub label_positions: Vec<usize>,
    /// Template copy of the subject.
    pub subj_positions: Vec<usize>,
    /// Template copy of the object.
    pub obj_positions: Vec<usize>,
    /// Subject mention inside the sentence segment.
    pub sent_subj_positions: Vec<usize>,
    pub sent_obj_positions: Vec<usize>,
    /// Position of the first sentence token.
    pub sentence_start: usize,
    pub sentence_len: usize,
    pub gold: usize,
}

impl PromptEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Maps a token span of the original sentence to encoding positions.
    pub fn sentence_positions(&self, span: Span) -> Vec<usize> {
        span.range().map(|i| self.sentence_start + i).collect()
    }

    pub fn segment_of(&self, position: usize) -> Result<Segment, TemplateError> {
        self.segments.get(position).copied().ok_or(TemplateError::OutOfRange { position, len: self.len() })
    }
}

/// Builds the prompt for `instance`. Sequences longer than `max_len` are an
/// error; nothing is truncated.
pub fn build_prompt(
    instance: &Instance,
    vocab: &Vocabulary,
    strategy: TokenStrategy,
    max_len: usize,
) -> Result<PromptEncoding, TemplateError> {
    instance.validate().map_err(TemplateError::InvalidInstance)?;
    let gold = vocab
        .relation_index(&instance.relation)
        .ok_or_else(|| TemplateError::UnknownRelation(instance.relation.clone()))?;
    let m = vocab.num_relations();
    let slot_ids: Vec<usize> = match strategy {
        TokenStrategy::Label => vocab.label_token_ids(),
        TokenStrategy::Mask => vec![vocab.mask(); m],
        TokenStrategy::Learnable => {
            if vocab.learnable_token_ids().len() != m {
                return Err(TemplateError::NoLearnableTokens);
            }
            vocab.learnable_token_ids().to_vec()
        }
    };
    let words = |xs: &[String]| xs.iter().map(|w| vocab.word_id(w)).collect::<Vec<_>>();
    let subj = words(instance.subj_tokens());
    let obj = words(instance.obj_tokens());
    let sentence = words(&instance.tokens);

    let len = 1 + m + 1 + subj.len() + 1 + obj.len() + 1 + sentence.len() + 1;
    if len > max_len {
        return Err(TemplateError::TooLong { len, max: max_len });
    }

    let mut ids = Vec::with_capacity(len);
    ids.push(vocab.cls());
    let label_positions: Vec<usize> = (ids.len()..ids.len() + m).collect();
    ids.extend(&slot_ids);
    ids.push(vocab.sep());
    let subj_positions: Vec<usize> = (ids.len()..ids.len() + subj.len()).collect();
    ids.extend(&subj);
    let mask_pos = ids.len();
    ids.push(vocab.mask());
    let obj_positions: Vec<usize> = (ids.len()..ids.len() + obj.len()).collect();
    ids.extend(&obj);
    ids.push(vocab.sep());
    let prompt_len = ids.len();
    let sentence_start = ids.len();
    ids.extend(&sentence);
    ids.push(vocab.sep());

    let segments =
        (0..ids.len()).map(|p| if p < prompt_len { Segment::Prompt } else { Segment::Sentence }).collect();
    let sent_subj_positions = instance.subj.range().map(|i| sentence_start + i).collect();
    let sent_obj_positions = instance.obj.range().map(|i| sentence_start + i).collect();
    Ok(PromptEncoding {
        ids,
        segments,
        mask_pos,
        label_positions,
        subj_positions,
        obj_positions,
        sent_subj_positions,
        sent_obj_positions,
        sentence_start,
        sentence_len: sentence.len(),
        gold,
    })
}

/// Position → segment lookup with bounds checking.
pub fn segment_of(enc: &PromptEncoding, position: usize) -> Result<Segment, TemplateError> {
    enc.segment_of(position)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fisher() -> (Instance, Vocabulary) {
        let tokens: Vec<String> =
            "Mark Fisher writes for the Dayton Daily News".split(' ').map(String::from).collect();
        let inst = Instance {
            tokens: tokens.clone(),
            subj: Span::new(0, 2),
            obj: Span::new(5, 8),
            relation: "per:employee_of".into(),
        };
        let mut vocab = Vocabulary::from_words(tokens);
        vocab.add_label_tokens(&["no_relation", "per:employee_of"]).unwrap();
        (inst, vocab)
    }

    #[test]
    fn ordering_matches_template() {
        let (inst, vocab) = fisher();
        let enc = build_prompt(&inst, &vocab, TokenStrategy::Label, DEFAULT_MAX_LEN).unwrap();
        let surface: Vec<&str> = enc.ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
        assert_eq!(
            &surface[..11],
            ["[CLS]", "[C1]", "[C2]", "[SEP]", "mark", "fisher", "[MASK]", "dayton", "daily", "news", "[SEP]"]
        );
        assert_eq!(&surface[11..19], ["mark", "fisher", "writes", "for", "the", "dayton", "daily", "news"]);
        assert_eq!(surface[19], "[SEP]");
        assert_eq!(enc.len(), 20);
        assert_eq!(enc.mask_pos, 6);
        assert_eq!(enc.label_positions, [1, 2]);
        assert_eq!(enc.subj_positions, [4, 5]);
        assert_eq!(enc.obj_positions, [7, 8, 9]);
        assert_eq!(enc.sent_subj_positions, [11, 12]);
        assert_eq!(enc.sent_obj_positions, [16, 17, 18]);
        assert_eq!(enc.gold, 1);
    }

    #[test]
    fn segment_partition() {
        let (inst, vocab) = fisher();
        let enc = build_prompt(&inst, &vocab, TokenStrategy::Label, DEFAULT_MAX_LEN).unwrap();
        // m + 4 + |e_s| + |e_o| = 2 + 4 + 2 + 3 = 11 template positions, 0..=10
        for p in 0..enc.len() {
            let want = if p <= 10 { Segment::Prompt } else { Segment::Sentence };
            assert_eq!(segment_of(&enc, p).unwrap(), want, "position {p}");
        }
        assert_eq!(segment_of(&enc, enc.mask_pos).unwrap(), Segment::Prompt);
        assert_eq!(segment_of(&enc, 0).unwrap(), Segment::Prompt);
        assert_eq!(segment_of(&enc, enc.len() - 1).unwrap(), Segment::Sentence);
        assert!(matches!(segment_of(&enc, enc.len()), Err(TemplateError::OutOfRange { .. })));
    }

    #[test]
    fn mask_and_learnable_strategies() {
        let (inst, mut vocab) = fisher();
        let enc = build_prompt(&inst, &vocab, TokenStrategy::Mask, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(enc.label_positions, [1, 2]);
        assert_eq!(enc.ids[1], vocab.mask());
        assert_eq!(enc.ids[2], vocab.mask());

        assert!(matches!(
            build_prompt(&inst, &vocab, TokenStrategy::Learnable, DEFAULT_MAX_LEN),
            Err(TemplateError::NoLearnableTokens)
        ));
        vocab.add_learnable_tokens();
        let enc = build_prompt(&inst, &vocab, TokenStrategy::Learnable, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(vocab.token(enc.ids[1]), Some("[L1]"));
        assert_eq!(vocab.token(enc.ids[2]), Some("[L2]"));
        assert!(!vocab.label_token_ids().contains(&enc.ids[1]));
    }

    #[test]
    fn too_long_is_an_error() {
        let (inst, vocab) = fisher();
        assert!(matches!(
            build_prompt(&inst, &vocab, TokenStrategy::Label, 19),
            Err(TemplateError::TooLong { len: 20, max: 19 })
        ));
    }

    #[test]
    fn unknown_relation_rejected() {
        let (mut inst, vocab) = fisher();
        inst.relation = "org:founded".into();
        assert!(matches!(
            build_prompt(&inst, &vocab, TokenStrategy::Label, DEFAULT_MAX_LEN),
            Err(TemplateError::UnknownRelation(_))
        ));
    }
}
