//! Post-LN transformer encoder whose attention picks one of four query
//! projections by the (query segment, key segment) pair.
//!
//! Projections use the row convention: a `d_in × d_out` weight `W` maps the
//! hidden rows `X` to `X·W`. Keys and values are shared across segments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::params::{normal_tensor, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::template::{PromptEncoding, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// FFN inner width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Rows of the positional embedding table.
    pub max_len: usize,
    pub ln_eps: f64,
    /// Standard deviation of token and position embeddings at initialisation.
    pub embed_std: f64,
    /// Standard deviation of projection weights; `None` means `1/√fan_in`.
    #[serde(default)]
    pub weight_std: Option<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, ffn_mult: 4, max_len: 160, ln_eps: 1e-12, embed_std: 0.02, weight_std: None }
    }
}

impl EncoderConfig {
    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_mult == 0 || self.max_len == 0 {
            return Err(EncoderError::Config("ffn_mult and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds positional table of {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("segments ({segments}) and ids ({ids}) differ in length")]
    SegmentLength { segments: usize, ids: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Parameter handles of one encoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    /// Query projections indexed by `[query segment][key segment]`,
    /// prompt = 0, sentence = 1.
    pub query: [[ParamId; 2]; 2],
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
    pub ln_attn_gain: ParamId,
    pub ln_attn_bias: ParamId,
    pub ln_ffn_gain: ParamId,
    pub ln_ffn_bias: ParamId,
}

fn seg_index(s: Segment) -> usize {
    match s {
        Segment::Prompt => 0,
        Segment::Sentence => 1,
    }
}

impl LayerParams {
    pub fn query_for(&self, q: Segment, k: Segment) -> ParamId {
        self.query[seg_index(q)][seg_index(k)]
    }

    pub fn queries(&self) -> [ParamId; 4] {
        [self.query[0][0], self.query[0][1], self.query[1][0], self.query[1][1]]
    }
}

/// Handles of every encoder parameter inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Allocates and randomly initialises the encoder inside `store`. The
    /// four query matrices of a layer start as copies of one draw.
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let d_ff = config.d_ff();
        let lecun = |fan_in: usize| config.weight_std.unwrap_or(1.0 / (fan_in as f64).sqrt());
        let token_embedding = store.add("embeddings.token", normal_tensor(rng, vocab_size, d, config.embed_std));
        let position_embedding =
            store.add("embeddings.position", normal_tensor(rng, config.max_len, d, config.embed_std));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let q0: Tensor<S> = normal_tensor(rng, d, d, lecun(d));
            let p = |n: &str| format!("layer{l}.{n}");
            let q_pp = store.add(p("attn.query_pp"), q0.clone());
            let q_ps = store.add(p("attn.query_ps"), q0.clone());
            let q_sp = store.add(p("attn.query_sp"), q0.clone());
            let q_ss = store.add(p("attn.query_ss"), q0);
            let key = store.add(p("attn.key"), normal_tensor(rng, d, d, lecun(d)));
            let value = store.add(p("attn.value"), normal_tensor(rng, d, d, lecun(d)));
            let output = store.add(p("attn.output"), normal_tensor(rng, d, d, lecun(d)));
            let ln_attn_gain = store.add(p("ln_attn.gain"), Tensor::filled(1, d, S::one()));
            let ln_attn_bias = store.add(p("ln_attn.bias"), Tensor::zeros(1, d));
            let ffn_in = store.add(p("ffn.in"), normal_tensor(rng, d, d_ff, lecun(d)));
            let ffn_in_bias = store.add(p("ffn.in_bias"), Tensor::zeros(1, d_ff));
            let ffn_out = store.add(p("ffn.out"), normal_tensor(rng, d_ff, d, lecun(d_ff)));
            let ffn_out_bias = store.add(p("ffn.out_bias"), Tensor::zeros(1, d));
            let ln_ffn_gain = store.add(p("ln_ffn.gain"), Tensor::filled(1, d, S::one()));
            let ln_ffn_bias = store.add(p("ln_ffn.bias"), Tensor::zeros(1, d));
            layers.push(LayerParams {
                query: [[q_pp, q_ps], [q_sp, q_ss]],
                key,
                value,
                output,
                ffn_in,
                ffn_in_bias,
                ffn_out,
                ffn_out_bias,
                ln_attn_gain,
                ln_attn_bias,
                ln_ffn_gain,
                ln_ffn_bias,
            });
        }
        Ok(Self { config, vocab_size, token_embedding, position_embedding, layers })
    }

    /// Re-derives handles from parameter names (used after loading a checkpoint).
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, config: EncoderConfig) -> Option<Self> {
        let token_embedding = store.id("embeddings.token")?;
        let position_embedding = store.id("embeddings.position")?;
        let vocab_size = store.get(token_embedding).rows();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| store.id(&format!("layer{l}.{n}"));
            layers.push(LayerParams {
                query: [[p("attn.query_pp")?, p("attn.query_ps")?], [p("attn.query_sp")?, p("attn.query_ss")?]],
                key: p("attn.key")?,
                value: p("attn.value")?,
                output: p("attn.output")?,
                ffn_in: p("ffn.in")?,
                ffn_in_bias: p("ffn.in_bias")?,
                ffn_out: p("ffn.out")?,
                ffn_out_bias: p("ffn.out_bias")?,
                ln_attn_gain: p("ln_attn.gain")?,
                ln_attn_bias: p("ln_attn.bias")?,
                ln_ffn_gain: p("ln_ffn.gain")?,
                ln_ffn_bias: p("ln_ffn.bias")?,
            });
        }
        Some(Self { config, vocab_size, token_embedding, position_embedding, layers })
    }
}

/// Graph nodes produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Final hidden states, `ℓ × d`.
    pub h: Var,
    /// Per layer: the FFN input (attention block output after add & norm), `ℓ × d`.
    pub ffn_inputs: Vec<Var>,
    /// Per layer: GELU output of the first FFN dense layer, `ℓ × 4d`.
    pub ffn_activations: Vec<Var>,
    /// Per layer, per head: attention weights, `ℓ × ℓ`.
    pub attention: Vec<Vec<Var>>,
}

/// Numeric encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput<S> {
    pub h: Tensor<S>,
    pub ffn_inputs: Vec<Tensor<S>>,
    pub ffn_activations: Vec<Tensor<S>>,
}

/// `0/1` matrix selecting the `(i, j)` pairs with `seg(i) = q`, `seg(j) = k`.
fn pair_mask<S: Scalar>(segments: &[Segment], q: Segment, k: Segment) -> Option<Tensor<S>> {
    let n = segments.len();
    let mut t = Tensor::zeros(n, n);
    let mut any = false;
    for (i, &si) in segments.iter().enumerate() {
        if si != q {
            continue;
        }
        for (j, &sj) in segments.iter().enumerate() {
            if sj == k {
                t.set(i, j, S::one());
                any = true;
            }
        }
    }
    any.then_some(t)
}

/// Multi-head self-attention where the score of query `i` against key `j`
/// uses the query projection chosen by `(segments[i], segments[j])`.
///
/// Returns the `ℓ × d` block output (after the output projection) and the
/// per-head attention weights.
pub fn segmented_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    segments: &[Segment],
    bound: &Bound,
    layer: &LayerParams,
    n_heads: usize,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    let d = g.value(x).cols();
    let d_head = d / n_heads;
    let scale = S::one() / S::from_usize(d_head).expect("width fits scalar").sqrt();

    let mut pairs = Vec::with_capacity(4);
    for q in [Segment::Prompt, Segment::Sentence] {
        for k in [Segment::Prompt, Segment::Sentence] {
            if let Some(mask) = pair_mask::<S>(segments, q, k) {
                let mask = g.constant(mask);
                let proj = g.matmul(x, bound[layer.query_for(q, k)])?;
                pairs.push((mask, proj));
            }
        }
    }
    let keys = g.matmul(x, bound[layer.key])?;
    let values = g.matmul(x, bound[layer.value])?;

    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let k_h = g.slice_cols(keys, lo, hi)?;
        let k_t = g.transpose(k_h);
        let mut scores: Option<Var> = None;
        for &(mask, proj) in &pairs {
            let q_h = g.slice_cols(proj, lo, hi)?;
            let raw = g.matmul(q_h, k_t)?;
            let selected = if pairs.len() == 1 { raw } else { g.hadamard(raw, mask)? };
            scores = Some(match scores {
                None => selected,
                Some(acc) => g.add(acc, selected)?,
            });
        }
        let scores = g.scale(scores.expect("at least one segment pair"), scale);
        let w = g.softmax_rows(scores);
        let v_h = g.slice_cols(values, lo, hi)?;
        heads.push(g.matmul(w, v_h)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((g.matmul(merged, bound[layer.output])?, weights))
}

fn affine_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    gain: Var,
    bias: Var,
    eps: S,
) -> Result<Var, AutodiffError> {
    let n = g.layer_norm(x, eps);
    let scaled = g.mul_row(n, gain)?;
    g.add_row(scaled, bias)
}

/// Records the encoder forward pass for token `ids` into `g`.
pub fn encode_graph<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    params: &EncoderParams,
    ids: &[usize],
    segments: &[Segment],
) -> Result<EncoderTrace, EncoderError> {
    let cfg = &params.config;
    if segments.len() != ids.len() {
        return Err(EncoderError::SegmentLength { segments: segments.len(), ids: ids.len() });
    }
    if ids.len() > cfg.max_len {
        return Err(EncoderError::TooLong { len: ids.len(), max_len: cfg.max_len });
    }
    let vocab = g.value(bound[params.token_embedding]).rows();
    if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
        return Err(EncoderError::TokenOutOfRange { id, vocab });
    }
    let eps = S::lit(cfg.ln_eps);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather(bound[params.token_embedding], ids)?;
    let pos = g.gather(bound[params.position_embedding], &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut trace =
        EncoderTrace { h: x, ffn_inputs: Vec::new(), ffn_activations: Vec::new(), attention: Vec::new() };
    for layer in &params.layers {
        let (attn, weights) = segmented_attention(g, x, segments, bound, layer, cfg.n_heads)?;
        let res = g.add(x, attn)?;
        let x1 = affine_norm(g, res, bound[layer.ln_attn_gain], bound[layer.ln_attn_bias], eps)?;

        let pre = g.matmul(x1, bound[layer.ffn_in])?;
        let pre = g.add_row(pre, bound[layer.ffn_in_bias])?;
        let act = g.gelu(pre);
        let ffn = g.matmul(act, bound[layer.ffn_out])?;
        let ffn = g.add_row(ffn, bound[layer.ffn_out_bias])?;
        let res = g.add(x1, ffn)?;
        x = affine_norm(g, res, bound[layer.ln_ffn_gain], bound[layer.ln_ffn_bias], eps)?;

        trace.ffn_inputs.push(x1);
        trace.ffn_activations.push(act);
        trace.attention.push(weights);
    }
    trace.h = x;
    Ok(trace)
}

/// Inference-only encoding of a prompt.
pub fn encode<S: Scalar>(
    enc: &PromptEncoding,
    params: &EncoderParams,
    store: &ParamStore<S>,
) -> Result<EncodeOutput<S>, EncoderError> {
    let mut g = Graph::new();
    let bound = store.bind_constants(&mut g);
    let trace = encode_graph(&mut g, &bound, params, &enc.ids, &enc.segments)?;
    Ok(EncodeOutput {
        h: g.value(trace.h).clone(),
        ffn_inputs: trace.ffn_inputs.iter().map(|&v| g.value(v).clone()).collect(),
        ffn_activations: trace.ffn_activations.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Hidden vectors the objectives read from `h`.
#[derive(Debug, Clone, Copy)]
pub struct Gathered {
    /// `1 × d`.
    pub mask: Var,
    /// `m × d`, row `i` at the `i`-th label slot.
    pub labels: Var,
    /// `1 × d`, mean over the subject positions.
    pub subj: Var,
    /// `1 × d`, mean over the object positions.
    pub obj: Var,
}

/// Where subject/object vectors are pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityPooling {
    /// Template copies next to `[MASK]`.
    #[default]
    Template,
    /// The mentions inside the sentence segment.
    Sentence,
}

/// Mean of the rows of `h` at `positions`.
pub fn pool_rows<S: Scalar>(g: &mut Graph<S>, h: Var, positions: &[usize]) -> Result<Var, AutodiffError> {
    let rows = g.gather(h, positions)?;
    Ok(if positions.len() == 1 { rows } else { g.mean_rows(rows) })
}

pub fn gather<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    enc: &PromptEncoding,
    pooling: EntityPooling,
) -> Result<Gathered, AutodiffError> {
    let mask = g.gather(h, &[enc.mask_pos])?;
    let labels = g.gather(h, &enc.label_positions)?;
    let (sp, op) = match pooling {
        EntityPooling::Template => (&enc.subj_positions, &enc.obj_positions),
        EntityPooling::Sentence => (&enc.sent_subj_positions, &enc.sent_obj_positions),
    };
    let subj = pool_rows(g, h, sp)?;
    let obj = pool_rows(g, h, op)?;
    Ok(Gathered { mask, labels, subj, obj })
}
