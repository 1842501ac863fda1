use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, Instance};

/// Number of instances kept per relation, and the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KShotSpec {
    k: usize,
    pub seed: u64,
}

impl KShotSpec {
    pub fn new(k: i64, seed: u64) -> Result<Self, CorpusError> {
        if k <= 0 {
            return Err(CorpusError::InvalidK(k));
        }
        Ok(Self { k: k as usize, seed })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Samples `k` instances per relation without replacement.
///
/// Classes with fewer than `k` instances contribute all of them. Output is
/// grouped by relation name (lexicographic), each group in sampled order, so
/// the result depends only on `(split, k, seed)`.
pub fn kshot_sample(split: &[Instance], spec: KShotSpec) -> Result<Vec<Instance>, CorpusError> {
    if split.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in split.iter().enumerate() {
        by_class.entry(inst.relation.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(by_class.len() * spec.k);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        out.extend(members.iter().take(spec.k).map(|&i| split[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;

    fn class(rel: &str, n: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance {
                tokens: vec![format!("w{i}"), "x".into(), "y".into()],
                subj: Span::new(0, 1),
                obj: Span::new(2, 3),
                relation: rel.into(),
            })
            .collect()
    }

    fn counts(xs: &[Instance]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for x in xs {
            *m.entry(x.relation.clone()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn three_classes_of_100_at_k8() {
        let split: Vec<_> = ["a", "b", "c"].iter().flat_map(|r| class(r, 100)).collect();
        let out = kshot_sample(&split, KShotSpec::new(8, 3).unwrap()).unwrap();
        assert_eq!(out.len(), 24);
        assert!(counts(&out).values().all(|&c| c == 8));
    }

    #[test]
    fn small_class_kept_whole() {
        let mut split = class("big", 50);
        split.extend(class("small", 5));
        let out = kshot_sample(&split, KShotSpec::new(8, 0).unwrap()).unwrap();
        let c = counts(&out);
        assert_eq!(c["small"], 5);
        assert_eq!(c["big"], 8);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let split: Vec<_> = ["a", "b"].iter().flat_map(|r| class(r, 40)).collect();
        let a = kshot_sample(&split, KShotSpec::new(4, 11).unwrap()).unwrap();
        let b = kshot_sample(&split, KShotSpec::new(4, 11).unwrap()).unwrap();
        let c = kshot_sample(&split, KShotSpec::new(4, 12).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(KShotSpec::new(0, 0), Err(CorpusError::InvalidK(0))));
        assert!(matches!(KShotSpec::new(-1, 0), Err(CorpusError::InvalidK(-1))));
        assert!(matches!(kshot_sample(&[], KShotSpec::new(4, 0).unwrap()), Err(CorpusError::EmptySplit)));
    }

    #[test]
    fn sampled_without_replacement() {
        let split = class("a", 30);
        let out = kshot_sample(&split, KShotSpec::new(16, 9).unwrap()).unwrap();
        let mut firsts: Vec<_> = out.iter().map(|i| i.tokens[0].clone()).collect();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 16);
    }
}
