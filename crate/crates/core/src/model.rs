//! Encoder, verbaliser and entity projections bundled with their vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::corpus::{Instance, Span};
use crate::encoder::{encode_graph, gather, pool_rows, EncoderConfig, EncoderError, EncoderParams};
use crate::objective::{
    entity_loss, entity_project, label_align_loss, mask_loss, project, total_loss_graph, transe_distance,
    verbalise, EntityProjections, ObjectiveConfig, ObjectiveError, Verbaliser,
};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::template::{build_prompt, PromptEncoding, TemplateError, TokenStrategy};
use crate::vocab::{init_label_embeddings, VocabError, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub strategy: TokenStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), objective: ObjectiveConfig::default(), strategy: TokenStrategy::Label }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("vocabulary has no relation labels")]
    NoRelations,
    #[error("parameter {0:?} missing from store")]
    MissingParam(String),
}

/// Graph nodes of the composite loss for one instance.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mask: Var,
    pub label: Option<Var>,
    /// `None` when no negative spans fit in the sentence or `α₂ = 0`.
    pub entity: Option<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPromptModel<S> {
    pub vocab: Vocabulary,
    pub store: ParamStore<S>,
    pub encoder: EncoderParams,
    pub verbaliser: Verbaliser,
    pub entity: EntityProjections,
    pub config: ModelConfig,
}

impl<S: Scalar> LabelPromptModel<S> {
    /// Fresh model. `vocab` must already carry its label tokens; learnable
    /// tokens are appended when the strategy asks for them. Label-token rows
    /// start as the mean of their sub-text embeddings.
    pub fn new(mut vocab: Vocabulary, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if vocab.num_relations() == 0 {
            return Err(ModelError::NoRelations);
        }
        config.objective.validate()?;
        if config.strategy == TokenStrategy::Learnable {
            vocab.add_learnable_tokens();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, vocab.len(), config.encoder, &mut rng)?;
        init_label_embeddings(&vocab, store.get_mut(encoder.token_embedding))?;
        let verbaliser =
            Verbaliser::init(&mut store, encoder.token_embedding, vocab.base_size(), vocab.num_relations(), &mut rng);
        let d = config.encoder.d_model;
        let entity = EntityProjections::init(&mut store, config.objective.proj_dim_for(d), d, &mut rng);
        Ok(Self { vocab, store, encoder, verbaliser, entity, config })
    }

    /// Reassembles a model from stored tensors (names as produced by [`Self::new`]).
    pub fn from_parts(vocab: Vocabulary, store: ParamStore<S>, config: ModelConfig) -> Result<Self, ModelError> {
        let missing = |n: &str| ModelError::MissingParam(n.to_string());
        let encoder = EncoderParams::from_store(&store, config.encoder).ok_or_else(|| missing("encoder"))?;
        let verbaliser = Verbaliser {
            weight: store.id("verbaliser.weight").ok_or_else(|| missing("verbaliser.weight"))?,
            bias: store.id("verbaliser.bias").ok_or_else(|| missing("verbaliser.bias"))?,
            token_embedding: encoder.token_embedding,
            first_label: vocab.base_size(),
            num_labels: vocab.num_relations(),
        };
        let entity = EntityProjections {
            subj: store.id("entity.phi_sub").ok_or_else(|| missing("entity.phi_sub"))?,
            obj: store.id("entity.phi_obj").ok_or_else(|| missing("entity.phi_obj"))?,
            rel: store.id("entity.phi_rel").ok_or_else(|| missing("entity.phi_rel"))?,
        };
        if store.get(encoder.token_embedding).rows() != vocab.len() {
            return Err(ModelError::Encoder(EncoderError::Config(format!(
                "embedding table has {} rows but vocabulary has {} tokens",
                store.get(encoder.token_embedding).rows(),
                vocab.len()
            ))));
        }
        Ok(Self { vocab, store, encoder, verbaliser, entity, config })
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn prompt(&self, instance: &Instance) -> Result<PromptEncoding, ModelError> {
        Ok(build_prompt(instance, &self.vocab, self.config.strategy, self.config.encoder.max_len)?)
    }

    /// Records the composite loss of one instance into `g`. `negatives` are
    /// the sentence spans for the corrupted triple.
    pub fn loss_graph(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        enc: &PromptEncoding,
        negatives: Option<(Span, Span)>,
    ) -> Result<LossTerms, ModelError> {
        let obj = &self.config.objective;
        let trace = encode_graph(g, bound, &self.encoder, &enc.ids, &enc.segments)?;
        let hv = gather(g, trace.h, enc, obj.pooling)?;
        let labels = self.verbaliser.label_matrix(g, bound)?;
        let (w, b) = (bound[self.verbaliser.weight], bound[self.verbaliser.bias]);

        let logits = verbalise(g, hv.mask, w, b, labels)?;
        let mask = mask_loss(g, logits, enc.gold)?;
        let label = if obj.alpha1 != 0.0 {
            let label_logits = verbalise(g, hv.labels, w, b, labels)?;
            Some(label_align_loss(g, label_logits)?)
        } else {
            None
        };
        let entity = match negatives {
            Some((ns, no)) if obj.alpha2 != 0.0 => {
                let (s, o, r) = entity_project(g, hv.subj, hv.obj, hv.mask, bound, &self.entity)?;
                let d_pos = transe_distance(g, s, r, o)?;
                let h_ns = pool_rows(g, trace.h, &enc.sentence_positions(ns))?;
                let h_no = pool_rows(g, trace.h, &enc.sentence_positions(no))?;
                let s_neg = project(g, h_ns, bound[self.entity.subj])?;
                let o_neg = project(g, h_no, bound[self.entity.obj])?;
                let d_neg = transe_distance(g, s_neg, r, o_neg)?;
                Some(entity_loss(g, d_pos, d_neg, S::lit(obj.gamma))?)
            }
            _ => None,
        };
        let total = total_loss_graph(g, mask, label, entity, obj)?;
        Ok(LossTerms { total, mask, label, entity, logits })
    }

    /// Mask-position logits over the `m` relations.
    pub fn logits_for(&self, enc: &PromptEncoding) -> Result<Vec<S>, ModelError> {
        let mut g = Graph::new();
        let bound = self.store.bind_constants(&mut g);
        let trace = encode_graph(&mut g, &bound, &self.encoder, &enc.ids, &enc.segments)?;
        let h_mask = g.gather(trace.h, &[enc.mask_pos])?;
        let labels = self.verbaliser.label_matrix(&mut g, &bound)?;
        let logits =
            verbalise(&mut g, h_mask, bound[self.verbaliser.weight], bound[self.verbaliser.bias], labels)?;
        Ok(g.value(logits).data().to_vec())
    }

    pub fn logits(&self, instance: &Instance) -> Result<Vec<S>, ModelError> {
        self.logits_for(&self.prompt(instance)?)
    }

    /// Relation index with the largest mask logit.
    pub fn predict(&self, instance: &Instance) -> Result<usize, ModelError> {
        Ok(argmax(&self.logits(instance)?))
    }

    /// Final-layer hidden vector at `[MASK]`.
    pub fn mask_hidden(&self, instance: &Instance) -> Result<Vec<S>, ModelError> {
        let enc = self.prompt(instance)?;
        let out = crate::encoder::encode(&enc, &self.encoder, &self.store)?;
        Ok(out.h.row_slice(enc.mask_pos).to_vec())
    }

    /// Logits from an already computed mask hidden vector.
    pub fn verbalise_hidden(&self, h_mask: &[S]) -> Result<Vec<S>, ModelError> {
        let mut g = Graph::new();
        let bound = self.store.bind_constants(&mut g);
        let h = g.constant(crate::autodiff::Tensor::row(h_mask.to_vec())?);
        let labels = self.verbaliser.label_matrix(&mut g, &bound)?;
        let logits = verbalise(&mut g, h, bound[self.verbaliser.weight], bound[self.verbaliser.bias], labels)?;
        Ok(g.value(logits).data().to_vec())
    }
}

/// Index of the largest value; ties go to the lower index, NaN never wins.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.1f64, 0.2, 0.0, 0.9, 0.3]), 3);
        assert_eq!(argmax(&[1.0f64, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.5]), 1);
    }

    #[test]
    fn label_rows_start_at_subtext_mean() {
        let corpus = generate_synthetic(4, 5, 64, 1).unwrap();
        let vocab = Vocabulary::build(&corpus);
        let model = LabelPromptModel::<f64>::new(vocab, ModelConfig::default(), 3).unwrap();
        let table = model.store.get(model.encoder.token_embedding);
        for label in model.vocab.relations() {
            let mean = crate::vocab::label_embedding(label, table);
            assert_eq!(table.row_slice(label.token_id), mean.as_slice());
        }
    }

    #[test]
    fn loss_is_finite_and_predicts_in_range() {
        let corpus = generate_synthetic(4, 5, 64, 2).unwrap();
        let vocab = Vocabulary::build(&corpus);
        let model = LabelPromptModel::<f64>::new(vocab, ModelConfig::default(), 0).unwrap();
        let inst = &corpus.train[0];
        let enc = model.prompt(inst).unwrap();
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let neg = crate::objective::sample_negative_spans(inst, &mut ChaCha8Rng::seed_from_u64(0));
        let terms = model.loss_graph(&mut g, &bound, &enc, neg).unwrap();
        assert!(g.scalar(terms.total).unwrap().is_finite());
        assert!(model.predict(inst).unwrap() < 4);
    }

    #[test]
    fn hidden_round_trip_matches_logits() {
        let corpus = generate_synthetic(3, 4, 64, 4).unwrap();
        let model = LabelPromptModel::<f64>::new(Vocabulary::build(&corpus), ModelConfig::default(), 1).unwrap();
        let inst = &corpus.test[0];
        let h = model.mask_hidden(inst).unwrap();
        assert_eq!(model.verbalise_hidden(&h).unwrap(), model.logits(inst).unwrap());
    }
}
