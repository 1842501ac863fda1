//! Verbaliser and training losses: mask cross-entropy, label alignment,
//! and the TransE-style entity margin loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::corpus::{Instance, Span};
use crate::encoder::EntityPooling;
use crate::params::{normal_tensor, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 0.3;
pub const DEFAULT_ALPHA1: f64 = 1.0;
pub const DEFAULT_ALPHA2: f64 = 0.04;
/// Longest negative span drawn for the entity loss.
pub const MAX_NEGATIVE_SPAN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Entity projection width; `None` means `d / 4`.
    pub proj_dim: Option<usize>,
    pub negative_seed: u64,
    pub pooling: EntityPooling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
            proj_dim: None,
            negative_seed: 0,
            pooling: EntityPooling::Template,
        }
    }
}

impl ObjectiveConfig {
    pub fn proj_dim_for(&self, d: usize) -> usize {
        self.proj_dim.unwrap_or((d / 4).max(1))
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(ObjectiveError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return Err(ObjectiveError::Config("loss weights must be finite".into()));
        }
        if self.proj_dim == Some(0) {
            return Err(ObjectiveError::Config("projection width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Verbaliser handles. `E_label` is not a separate parameter: it is the
/// block of label-token rows `first_label .. first_label + m` of the token
/// embedding table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbaliser {
    pub weight: ParamId,
    pub bias: ParamId,
    pub token_embedding: ParamId,
    pub first_label: usize,
    pub num_labels: usize,
}

impl Verbaliser {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        token_embedding: ParamId,
        first_label: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Self {
        let d = store.get(token_embedding).cols();
        let weight = store.add("verbaliser.weight", normal_tensor(rng, d, d, 1.0 / (d as f64).sqrt()));
        let bias = store.add("verbaliser.bias", Tensor::zeros(1, d));
        Self { weight, bias, token_embedding, first_label, num_labels }
    }

    /// `E_label` as a graph node, `m × d`.
    pub fn label_matrix<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound) -> Result<Var, AutodiffError> {
        g.slice_rows(bound[self.token_embedding], self.first_label, self.first_label + self.num_labels)
    }
}

/// `φ_sub`, `φ_obj`, `φ_rel`, each `p × d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityProjections {
    pub subj: ParamId,
    pub obj: ParamId,
    pub rel: ParamId,
}

impl EntityProjections {
    pub fn init<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, p: usize, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            subj: store.add("entity.phi_sub", normal_tensor(rng, p, d, std)),
            obj: store.add("entity.phi_obj", normal_tensor(rng, p, d, std)),
            rel: store.add("entity.phi_rel", normal_tensor(rng, p, d, std)),
        }
    }
}

/// Logits `E_label · (W_v h + b)` for every row of `h` (`n × d` → `n × m`).
pub fn verbalise<S: Scalar>(g: &mut Graph<S>, h: Var, weight: Var, bias: Var, labels: Var) -> Result<Var, AutodiffError> {
    let t = g.matmul(h, weight)?;
    let t = g.add_row(t, bias)?;
    let lt = g.transpose(labels);
    g.matmul(t, lt)
}

/// `−log p(gold | x)` from the mask logits (`1 × m`).
pub fn mask_loss<S: Scalar>(g: &mut Graph<S>, mask_logits: Var, gold: usize) -> Result<Var, AutodiffError> {
    g.cross_entropy(mask_logits, &[gold])
}

/// Mean cross-entropy of row `i` of the label-slot logits (`m × m`) against target `i`.
pub fn label_align_loss<S: Scalar>(g: &mut Graph<S>, label_logits: Var) -> Result<Var, AutodiffError> {
    let m = g.value(label_logits).rows();
    let targets: Vec<usize> = (0..m).collect();
    g.cross_entropy(label_logits, &targets)
}

/// `h · φᵀ` for a `1 × d` hidden row and a `p × d` projection.
pub fn project<S: Scalar>(g: &mut Graph<S>, h: Var, phi: Var) -> Result<Var, AutodiffError> {
    let pt = g.transpose(phi);
    g.matmul(h, pt)
}

/// Projected triple `(s, o, r)`.
pub fn entity_project<S: Scalar>(
    g: &mut Graph<S>,
    h_sub: Var,
    h_obj: Var,
    h_mask: Var,
    bound: &Bound,
    proj: &EntityProjections,
) -> Result<(Var, Var, Var), AutodiffError> {
    Ok((
        project(g, h_sub, bound[proj.subj])?,
        project(g, h_obj, bound[proj.obj])?,
        project(g, h_mask, bound[proj.rel])?,
    ))
}

/// `‖s + r − o‖₂`.
pub fn transe_distance<S: Scalar>(g: &mut Graph<S>, s: Var, r: Var, o: Var) -> Result<Var, AutodiffError> {
    let sr = g.add(s, r)?;
    let diff = g.sub(sr, o)?;
    Ok(g.l2_norm(diff))
}

/// `−log σ(γ − d_pos) − log σ(d_neg − γ)` on graph scalars.
pub fn entity_loss<S: Scalar>(g: &mut Graph<S>, d_pos: Var, d_neg: Var, gamma: S) -> Result<Var, AutodiffError> {
    let gamma_t = g.constant(Tensor::scalar(gamma));
    let pos_arg = g.sub(gamma_t, d_pos)?;
    let neg_arg = g.sub(d_neg, gamma_t)?;
    let pos = g.sigmoid(pos_arg);
    let pos = g.log(pos);
    let neg = g.sigmoid(neg_arg);
    let neg = g.log(neg);
    let both = g.add(pos, neg)?;
    Ok(g.scale(both, -S::one()))
}

fn log_sigmoid<S: Scalar>(x: S) -> S {
    // log σ(x) = −softplus(−x), evaluated without overflow.
    if x >= S::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numeric form of [`entity_loss`] on plain distances.
pub fn entity_loss_value<S: Scalar>(d_pos: S, d_neg: S, gamma: S) -> S {
    -log_sigmoid(gamma - d_pos) - log_sigmoid(d_neg - gamma)
}

/// Numeric `‖s + r − o‖₂` on plain vectors.
pub fn distance_value<S: Scalar>(s: &[S], r: &[S], o: &[S]) -> S {
    s.iter().zip(r).zip(o).map(|((&a, &b), &c)| (a + b - c) * (a + b - c)).sum::<S>().sqrt()
}

/// Probabilities over labels from logits (softmax).
pub fn probabilities<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn disjoint(a: Span, b: Span) -> bool {
    a.end <= b.start || b.end <= a.start
}

fn pick_span<R: Rng + ?Sized>(n: usize, len: usize, avoid: &[Span], rng: &mut R) -> Option<Span> {
    if len == 0 || len > n {
        return None;
    }
    let starts: Vec<usize> =
        (0..=n - len).filter(|&s| avoid.iter().all(|&a| disjoint(Span::new(s, s + len), a))).collect();
    if starts.is_empty() {
        return None;
    }
    let s = starts[rng.random_range(0..starts.len())];
    Some(Span::new(s, s + len))
}

/// Draws two sentence spans for the negative triple, each of length
/// `1..=3`, disjoint from both gold spans and from each other. Falls back
/// to single tokens when longer spans do not fit; `None` when even that is
/// impossible.
pub fn sample_negative_spans<R: Rng + ?Sized>(instance: &Instance, rng: &mut R) -> Option<(Span, Span)> {
    let n = instance.tokens.len();
    let gold = [instance.subj, instance.obj];
    let len_a = rng.random_range(1..=MAX_NEGATIVE_SPAN);
    let len_b = rng.random_range(1..=MAX_NEGATIVE_SPAN);
    let attempt = |la: usize, lb: usize, rng: &mut R| {
        let a = pick_span(n, la, &gold, rng)?;
        let b = pick_span(n, lb, &[gold[0], gold[1], a], rng)?;
        Some((a, b))
    };
    attempt(len_a, len_b, rng).or_else(|| attempt(1, 1, rng))
}

/// Weighted sum `L_mask + α₁ L_label + α₂ L_entity` on plain values,
/// rejecting non-finite components.
pub fn total_loss<S: Scalar>(mask: S, label: S, entity: S, cfg: &ObjectiveConfig) -> Result<S, ObjectiveError> {
    for (component, value) in [("mask", mask), ("label", label), ("entity", entity)] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { component, value: value.as_f64() });
        }
    }
    Ok(mask + S::lit(cfg.alpha1) * label + S::lit(cfg.alpha2) * entity)
}

/// Graph form of [`total_loss`]; terms with zero weight are left out.
pub fn total_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    mask: Var,
    label: Option<Var>,
    entity: Option<Var>,
    cfg: &ObjectiveConfig,
) -> Result<Var, AutodiffError> {
    let mut total = mask;
    for (term, w) in [(label, cfg.alpha1), (entity, cfg.alpha2)] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = g.scale(t, S::lit(w));
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
