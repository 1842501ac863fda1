mod common;

use common::{max_abs_diff, random_instance, reference_encode, seeded, to_mat};
use labelprompt::corpus::generate_synthetic;
use labelprompt::encoder::{encode, encode_graph, gather, EncoderConfig, EncoderParams, EntityPooling};
use labelprompt::model::{LabelPromptModel, ModelConfig};
use labelprompt::template::{build_prompt, Segment, TokenStrategy, DEFAULT_MAX_LEN};
use labelprompt::vocab::Vocabulary;
use labelprompt::{Graph, ParamStore, Tensor};
use rand::Rng;

fn toy_model(seed: u64) -> (LabelPromptModel<f64>, Vec<String>, Vec<String>) {
    let corpus = generate_synthetic(8, 10, 200, seed).unwrap();
    let vocab = Vocabulary::build(&corpus);
    let words: Vec<String> = corpus.all_instances().flat_map(|i| i.tokens.clone()).collect();
    let rels = corpus.relations().to_vec();
    (LabelPromptModel::new(vocab, ModelConfig::default(), seed).unwrap(), words, rels)
}

/// Gives each of the four query matrices its own random values.
fn untie_queries(model: &mut LabelPromptModel<f64>, seed: u64) {
    let mut rng = seeded(seed);
    for lp in model.encoder.layers.clone() {
        for q in lp.queries() {
            for v in model.store.get_mut(q).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn tied_queries_match_standard_attention() {
    let (model, words, rels) = toy_model(1);
    let mut rng = seeded(11);
    for _ in 0..20 {
        let inst = random_instance(&mut rng, &words, &rels, 30);
        let enc = model.prompt(&inst).unwrap();
        let out = encode(&enc, &model.encoder, &model.store).unwrap();
        let reference = reference_encode(&model.store, &model.encoder, &enc.ids, None);
        assert!(max_abs_diff(&reference.h, &out.h) < 1e-9);
    }
}

#[test]
fn untied_queries_match_segment_reference() {
    let (mut model, words, rels) = toy_model(2);
    untie_queries(&mut model, 5);
    let mut rng = seeded(12);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, &words, &rels, 20);
        let enc = model.prompt(&inst).unwrap();
        let out = encode(&enc, &model.encoder, &model.store).unwrap();
        let seg = reference_encode(&model.store, &model.encoder, &enc.ids, Some(&enc.segments));
        let std = reference_encode(&model.store, &model.encoder, &enc.ids, None);
        assert!(max_abs_diff(&seg.h, &out.h) < 1e-9);
        for (r, a) in seg.ffn_activations.iter().zip(&out.ffn_activations) {
            assert!(max_abs_diff(r, a) < 1e-9);
        }
        // once untied, the segment choice matters
        assert!(max_abs_diff(&std.h, &out.h) > 1e-6);
    }
}

#[test]
fn zero_layers_is_embedding_plus_position() {
    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig { n_layers: 0, d_model: 8, n_heads: 2, max_len: 10, ..Default::default() };
    let params = EncoderParams::init(&mut store, 12, cfg, &mut seeded(0)).unwrap();
    let ids = [3, 7, 7, 0];
    let mut g = Graph::new();
    let bound = store.bind_constants(&mut g);
    let trace = encode_graph(&mut g, &bound, &params, &ids, &[Segment::Prompt; 4]).unwrap();
    let tok = store.get(params.token_embedding);
    let pos = store.get(params.position_embedding);
    let h = g.value(trace.h);
    for (i, &id) in ids.iter().enumerate() {
        for c in 0..8 {
            assert_eq!(h.get(i, c), tok.get(id, c) + pos.get(i, c));
        }
    }
    assert!(trace.ffn_activations.is_empty());
}

#[test]
fn shapes_and_determinism() {
    let (model, words, rels) = toy_model(3);
    let mut rng = seeded(13);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, &words, &rels, 25);
        let enc = model.prompt(&inst).unwrap();
        let a = encode(&enc, &model.encoder, &model.store).unwrap();
        let b = encode(&enc, &model.encoder, &model.store).unwrap();
        assert_eq!(a.h.shape(), &[enc.len(), 64]);
        assert_eq!(a.ffn_activations.len(), 2);
        for act in &a.ffn_activations {
            assert_eq!(act.shape(), &[enc.len(), 256]);
        }
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.h), bits(&b.h));
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (mut model, words, rels) = toy_model(4);
    untie_queries(&mut model, 9);
    let inst = random_instance(&mut seeded(14), &words, &rels, 30);
    let enc = model.prompt(&inst).unwrap();
    let mut g = Graph::new();
    let bound = model.store.bind_constants(&mut g);
    let trace = encode_graph(&mut g, &bound, &model.encoder, &enc.ids, &enc.segments).unwrap();
    for layer in &trace.attention {
        for &w in layer {
            let w = g.value(w);
            for r in 0..w.rows() {
                let s: f64 = w.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(w.row_slice(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}

#[test]
fn all_four_queries_receive_gradient() {
    let (model, words, rels) = toy_model(5);
    let inst = random_instance(&mut seeded(15), &words, &rels, 15);
    let enc = model.prompt(&inst).unwrap();
    assert!(enc.segments.contains(&Segment::Prompt) && enc.segments.contains(&Segment::Sentence));
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    // sentence queries of the last layer reach the loss only through the
    // negative spans, as in a real training step
    let negatives = labelprompt::objective::sample_negative_spans(&inst, &mut seeded(1));
    assert!(negatives.is_some());
    let terms = model.loss_graph(&mut g, &bound, &enc, negatives).unwrap();
    let grads = g.backward(terms.total).unwrap();
    for lp in &model.encoder.layers {
        for q in lp.queries() {
            let gq = grads.wrt(bound[q]);
            assert!(gq.data().iter().any(|&v| v != 0.0), "{} has zero gradient", model.store.name(q));
        }
    }
}

#[test]
fn ffn_activations_recompute_from_layer_inputs() {
    let (model, words, rels) = toy_model(6);
    let inst = random_instance(&mut seeded(16), &words, &rels, 30);
    let enc = model.prompt(&inst).unwrap();
    let out = encode(&enc, &model.encoder, &model.store).unwrap();
    for (l, lp) in model.encoder.layers.iter().enumerate() {
        let x = to_mat(&out.ffn_inputs[l]);
        let w1 = model.store.get(lp.ffn_in);
        let b1 = model.store.get(lp.ffn_in_bias);
        for (p, row) in x.iter().enumerate() {
            for j in 0..w1.cols() {
                let pre: f64 = row.iter().enumerate().map(|(k, v)| v * w1.get(k, j)).sum::<f64>() + b1.get(0, j);
                let want = 0.5 * pre * (1.0 + libm::erf(pre / std::f64::consts::SQRT_2));
                assert!((out.ffn_activations[l].get(p, j) - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_token_sequence_attends_to_itself() {
    let (model, _, _) = toy_model(7);
    let mut g = Graph::new();
    let bound = model.store.bind_constants(&mut g);
    let trace = encode_graph(&mut g, &bound, &model.encoder, &[2], &[Segment::Sentence]).unwrap();
    for layer in &trace.attention {
        for &w in layer {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }
}

#[test]
fn gather_pools_entities() {
    let (model, _, _) = toy_model(8);
    let corpus = generate_synthetic(8, 10, 200, 8).unwrap();
    let inst = corpus.train.iter().find(|i| i.subj.len() == 1 && i.obj.len() == 2).expect("fixture shape");
    let enc = build_prompt(inst, &model.vocab, TokenStrategy::Label, DEFAULT_MAX_LEN).unwrap();
    let d = 64;
    let mut h = Tensor::<f64>::zeros(enc.len(), d);
    let mut rng = seeded(3);
    for v in h.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    // equal rows at the object copy pool to that row
    let shared: Vec<f64> = (0..d).map(|c| c as f64).collect();
    for &p in &enc.obj_positions {
        h.row_slice_mut(p).copy_from_slice(&shared);
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let got = gather(&mut g, hv, &enc, EntityPooling::Template).unwrap();
    assert_eq!(g.value(got.subj).data(), h.row_slice(enc.subj_positions[0]));
    assert_eq!(g.value(got.obj).data(), shared.as_slice());
    assert_eq!(g.value(got.mask).data(), h.row_slice(enc.mask_pos));
    assert_eq!(g.value(got.labels).rows(), model.num_relations());
    let sent = gather(&mut g, hv, &enc, EntityPooling::Sentence).unwrap();
    assert_eq!(g.value(sent.subj).data(), h.row_slice(enc.sent_subj_positions[0]));
}

#[test]
fn out_of_range_token_is_rejected() {
    let (model, _, _) = toy_model(9);
    let mut g = Graph::new();
    let bound = model.store.bind_constants(&mut g);
    let bad = model.vocab.len();
    assert!(encode_graph(&mut g, &bound, &model.encoder, &[2, bad], &[Segment::Prompt; 2]).is_err());
}
