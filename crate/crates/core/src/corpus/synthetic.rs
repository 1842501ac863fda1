use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Instance, Span, TACRED_NO_RELATION};

/// Parameters of a synthetic relation corpus.
///
/// Every sentence reads `[filler*] SUBJ trigger OBJ [filler*]`. Relation `r`
/// (for `r ≥ 1`) owns the trigger word `trigr` and is named `rel:trigr`, so
/// its decomposed label text contains the trigger. No-relation sentences put
/// a filler word where the trigger would be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Relation count including no-relation.
    pub n_relations: usize,
    /// Training instances per relation.
    pub per_class: usize,
    /// Number of distinct words the generator may use.
    pub vocab_size: usize,
    pub seed: u64,
    /// Validation and test instances per relation; defaults to `per_class / 4` (at least 1).
    pub eval_per_class: Option<usize>,
}

const MAX_OUTER_FILLERS: usize = 3;
const MAX_ENTITY_LEN: usize = 2;

impl SyntheticSpec {
    pub fn new(n_relations: usize, per_class: usize, vocab_size: usize, seed: u64) -> Self {
        Self { n_relations, per_class, vocab_size, seed, eval_per_class: None }
    }

    pub fn trigger_word(r: usize) -> String {
        format!("trig{r}")
    }

    pub fn relation_name(r: usize) -> String {
        if r == 0 {
            TACRED_NO_RELATION.to_string()
        } else {
            format!("rel:{}", Self::trigger_word(r))
        }
    }

    /// Filler words are namespaced by seed, so corpora drawn with different
    /// seeds never share a filler.
    fn filler_word(seed: u64, j: usize) -> String {
        format!("fill{seed}_{j}")
    }

    fn entity_word(j: usize) -> String {
        format!("ent{j}")
    }

    pub fn generate(&self) -> Result<Corpus, CorpusError> {
        if self.n_relations < 2 {
            return Err(CorpusError::InvalidSynthetic(format!(
                "need at least 2 relations (including no-relation), got {}",
                self.n_relations
            )));
        }
        if self.per_class == 0 {
            return Err(CorpusError::InvalidSynthetic("per_class must be positive".into()));
        }
        let triggers = self.n_relations - 1;
        let free = self.vocab_size.saturating_sub(triggers);
        let n_entities = free / 2;
        let n_fillers = free - n_entities;
        if n_entities < 4 || n_fillers < 4 {
            return Err(CorpusError::InvalidSynthetic(format!(
                "vocab_size {} too small for {} triggers plus 4 entity and 4 filler words",
                self.vocab_size, triggers
            )));
        }
        let entities: Vec<String> = (0..n_entities).map(Self::entity_word).collect();
        let fillers: Vec<String> = (0..n_fillers).map(|j| Self::filler_word(self.seed, j)).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eval = self.eval_per_class.unwrap_or((self.per_class / 4).max(1));
        let make_split = |per_class: usize, rng: &mut ChaCha8Rng| {
            let mut split = Vec::with_capacity(per_class * self.n_relations);
            for r in 0..self.n_relations {
                for _ in 0..per_class {
                    split.push(self.sentence(r, &entities, &fillers, rng));
                }
            }
            split.shuffle(rng);
            split
        };
        let train = make_split(self.per_class, &mut rng);
        let validation = make_split(eval, &mut rng);
        let test = make_split(eval, &mut rng);
        let relations = (0..self.n_relations).map(Self::relation_name).collect();
        Ok(Corpus::with_relations(train, validation, test, TACRED_NO_RELATION, relations))
    }

    fn sentence(&self, r: usize, entities: &[String], fillers: &[String], rng: &mut ChaCha8Rng) -> Instance {
        let pick = |pool: &[String], rng: &mut ChaCha8Rng| pool[rng.random_range(0..pool.len())].clone();
        let mut tokens = Vec::new();
        for _ in 0..rng.random_range(0..=MAX_OUTER_FILLERS) {
            tokens.push(pick(fillers, rng));
        }
        let subj_start = tokens.len();
        for _ in 0..rng.random_range(1..=MAX_ENTITY_LEN) {
            tokens.push(pick(entities, rng));
        }
        let subj = Span::new(subj_start, tokens.len());
        tokens.push(if r == 0 { pick(fillers, rng) } else { Self::trigger_word(r) });
        let obj_start = tokens.len();
        for _ in 0..rng.random_range(1..=MAX_ENTITY_LEN) {
            tokens.push(pick(entities, rng));
        }
        let obj = Span::new(obj_start, tokens.len());
        for _ in 0..rng.random_range(0..=MAX_OUTER_FILLERS) {
            tokens.push(pick(fillers, rng));
        }
        Instance { tokens, subj, obj, relation: Self::relation_name(r) }
    }
}

/// Shorthand for [`SyntheticSpec::generate`] with default evaluation split sizes.
pub fn generate_synthetic(
    n_relations: usize,
    per_class: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    SyntheticSpec::new(n_relations, per_class, vocab_size, seed).generate()
}
