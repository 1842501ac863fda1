//! Plain-loop reference implementations shared by the integration and
//! acceptance tests. Nothing here touches the autodiff graph.

#![allow(dead_code)]

use labelprompt::corpus::{Instance, Span};
use labelprompt::encoder::EncoderParams;
use labelprompt::template::Segment;
use labelprompt::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &labelprompt::Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter().enumerate().map(|(k, v)| (v - mean) * inv * gain[k] + bias[k]).collect()
        })
        .collect()
}

/// Output of the reference encoder.
pub struct Reference {
    pub h: Mat,
    pub ffn_activations: Vec<Mat>,
}

/// Encoder forward pass with explicit loops. With `segments = None` every
/// score uses the prompt–prompt query matrix (standard attention);
/// otherwise the query matrix is chosen per `(segment(i), segment(j))`.
pub fn reference_encode(
    store: &ParamStore<f64>,
    params: &EncoderParams,
    ids: &[usize],
    segments: Option<&[Segment]>,
) -> Reference {
    let cfg = params.config;
    let tok = to_mat(store.get(params.token_embedding));
    let pos = to_mat(store.get(params.position_embedding));
    let mut x: Mat = ids.iter().enumerate().map(|(i, &id)| tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let n = ids.len();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut acts = Vec::new();
    for lp in &params.layers {
        let seg = |i: usize| segments.map(|s| s[i]).unwrap_or(Segment::Prompt);
        let q_all: Vec<Vec<Mat>> = [Segment::Prompt, Segment::Sentence]
            .iter()
            .map(|&a| {
                [Segment::Prompt, Segment::Sentence]
                    .iter()
                    .map(|&b| matmul(&x, &to_mat(store.get(lp.query_for(a, b)))))
                    .collect()
            })
            .collect();
        let si = |s: Segment| if s == Segment::Prompt { 0 } else { 1 };
        let k = matmul(&x, &to_mat(store.get(lp.key)));
        let v = matmul(&x, &to_mat(store.get(lp.value)));
        let mut merged = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let q = &q_all[si(seg(i))][si(seg(j))][i];
                        cols.clone().map(|c| q[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    merged[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let attn = matmul(&merged, &to_mat(store.get(lp.output)));
        let res: Mat = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let x1 = layer_norm(&res, store.get(lp.ln_attn_gain).data(), store.get(lp.ln_attn_bias).data(), cfg.ln_eps);
        let b1 = store.get(lp.ffn_in_bias).data();
        let act: Mat = matmul(&x1, &to_mat(store.get(lp.ffn_in)))
            .into_iter()
            .map(|row| row.iter().enumerate().map(|(c, v)| gelu(v + b1[c])).collect())
            .collect();
        let b2 = store.get(lp.ffn_out_bias).data();
        let f = matmul(&act, &to_mat(store.get(lp.ffn_out)));
        let res: Mat = x1.iter().zip(&f).map(|(a, b)| a.iter().zip(b).enumerate().map(|(c, (p, q))| p + q + b2[c]).collect()).collect();
        x = layer_norm(&res, store.get(lp.ln_ffn_gain).data(), store.get(lp.ln_ffn_bias).data(), cfg.ln_eps);
        acts.push(act);
    }
    Reference { h: x, ffn_activations: acts }
}

pub fn max_abs_diff(a: &Mat, b: &labelprompt::Tensor<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(r, c)).abs());
        }
    }
    worst
}

/// Random instance over `words` with non-overlapping subject and object.
pub fn random_instance(rng: &mut ChaCha8Rng, words: &[String], relations: &[String], max_len: usize) -> Instance {
    let n = rng.random_range(4..=max_len.max(4));
    let tokens: Vec<String> = (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect();
    let s_len = rng.random_range(1..=2);
    let s_start = rng.random_range(0..n / 2);
    let subj = Span::new(s_start, (s_start + s_len).min(n / 2));
    let o_start = rng.random_range(n / 2..n);
    let obj = Span::new(o_start, (o_start + rng.random_range(1..=2)).min(n));
    Instance { tokens, subj, obj, relation: relations[rng.random_range(0..relations.len())].clone() }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Micro-F1 from raw counts: correct = gold == pred on a scored class,
/// guessed = scored predictions, actual = scored golds. Returns
/// `(tp, fp, fn, 2·correct/(guessed+actual), 2PR/(P+R))`; the two F1 forms
/// are equal in exact arithmetic.
pub fn brute_force_f1(pairs: &[(usize, usize)], excluded: Option<usize>) -> (usize, usize, usize, f64, f64) {
    let scored = |c: usize| Some(c) != excluded;
    let correct = pairs.iter().filter(|(g, p)| g == p && scored(*g)).count();
    let guessed = pairs.iter().filter(|(_, p)| scored(*p)).count();
    let actual = pairs.iter().filter(|(g, _)| scored(*g)).count();
    let precision = if guessed == 0 { 0.0 } else { correct as f64 / guessed as f64 };
    let recall = if actual == 0 { 0.0 } else { correct as f64 / actual as f64 };
    let harmonic = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let ratio = if guessed + actual == 0 { 0.0 } else { (2 * correct) as f64 / (guessed + actual) as f64 };
    (correct, guessed - correct, actual - correct, ratio, harmonic)
}

/// Random `(gold, pred)` pairs over `classes` classes, biased towards
/// correct predictions so every branch of the scorer is exercised.
pub fn random_pairs(rng: &mut ChaCha8Rng, classes: usize) -> Vec<(usize, usize)> {
    let n = rng.random_range(1..200);
    (0..n)
        .map(|_| {
            let gold = rng.random_range(0..classes);
            let pred = if rng.random_bool(0.4) { gold } else { rng.random_range(0..classes) };
            (gold, pred)
        })
        .collect()
}

/// Split with unique sentences whose classes have between 1 and 50 members.
pub fn uneven_split(rng: &mut ChaCha8Rng, classes: usize) -> Vec<Instance> {
    let mut out = Vec::new();
    for c in 0..classes {
        for i in 0..rng.random_range(1..=50) {
            out.push(Instance {
                tokens: vec![format!("s{c}_{i}"), "x".into(), "y".into()],
                subj: Span::new(0, 1),
                obj: Span::new(2, 3),
                relation: format!("r{c}"),
            });
        }
    }
    out
}

/// Checks per-class counts, membership, no duplicates and determinism.
pub fn kshot_contract(split: &[Instance], k: usize, seed: u64) -> Result<(), String> {
    use labelprompt::corpus::{kshot_sample, KShotSpec};
    use std::collections::{BTreeMap, HashSet};
    let spec = KShotSpec::new(k as i64, seed).map_err(|e| e.to_string())?;
    let a = kshot_sample(split, spec).map_err(|e| e.to_string())?;
    let b = kshot_sample(split, spec).map_err(|e| e.to_string())?;
    if a != b {
        return Err(format!("k={k}: not deterministic"));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for i in split {
        *sizes.entry(&i.relation).or_default() += 1;
    }
    let mut got: BTreeMap<&str, usize> = BTreeMap::new();
    for i in &a {
        *got.entry(&i.relation).or_default() += 1;
    }
    for (rel, &n) in &sizes {
        let want = n.min(k);
        if got.get(rel).copied().unwrap_or(0) != want {
            return Err(format!("k={k}: {rel} has {:?}, want {want}", got.get(rel)));
        }
    }
    let unique: HashSet<&Vec<String>> = a.iter().map(|i| &i.tokens).collect();
    if unique.len() != a.len() || !a.iter().all(|i| split.contains(i)) {
        return Err(format!("k={k}: duplicates or foreign instances"));
    }
    Ok(())
}

/// Forty relation names in the `type:role_words` style; some share pieces,
/// one has a piece that never occurs in a sentence.
pub fn forty_relations() -> Vec<String> {
    let heads = ["per", "org"];
    let tails = [
        "title", "employee_of", "city_of_birth", "country_of_death", "spouse", "children", "parents",
        "siblings", "origin", "age", "religion", "charges", "alternate_names", "founded_by", "members",
        "member_of", "top_members/employees", "shareholders", "website", "political/religious_affiliation",
    ];
    heads.iter().flat_map(|h| tails.iter().map(move |t| format!("{h}:{t}"))).collect()
}

/// Largest deviation between each label token row and the mean of its
/// sub-text rows, recomputed independently from the token table.
pub fn label_init_error(vocab: &labelprompt::vocab::Vocabulary, table: &labelprompt::Tensor<f64>) -> f64 {
    let mut worst = 0.0f64;
    for label in vocab.relations() {
        let ids: Vec<usize> = labelprompt::vocab::decompose_label(&label.text)
            .iter()
            .map(|p| vocab.id(p).filter(|&id| id < vocab.base_size()).unwrap_or(vocab.unk()))
            .collect();
        for c in 0..table.cols() {
            let mean = ids.iter().map(|&id| table.get(id, c)).sum::<f64>() / ids.len() as f64;
            worst = worst.max((mean - table.get(label.token_id, c)).abs());
        }
    }
    worst
}
