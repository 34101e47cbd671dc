use proptest::prelude::*;

use super::*;
use crate::autodiff::{Array, Tape};
use crate::rng::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 10,
        d_model: 8,
        layers: 2,
        heads: 2,
        mlp_hidden: 12,
        visual_tokens: 2,
        image_dim: 5,
        max_context: 16,
        projection: ProjectionKind::Mlp,
        projection_hidden: 6,
        init_std: 0.5,
        layer_norm_eps: 1e-5,
    }
}

fn feature(dim: usize, seed: u64) -> ImageFeature {
    let mut rng = Rng::new(seed);
    ImageFeature((0..dim).map(|_| rng.normal()).collect())
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn linear_ref(x: &[f64], l: &Linear<f64>) -> Vec<f64> {
    let (input, output) = (l.input_dim(), l.output_dim());
    (0..output)
        .map(|j| l.bias.data()[j] + (0..input).map(|i| x[i] * l.weight.data()[i * output + j]).sum::<f64>())
        .collect()
}

fn layer_norm_ref(x: &[f64], g: &Array<f64>, b: &Array<f64>, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

/// Straight-line forward pass over plain vectors, independent of the tape.
fn naive_last_logits(p: &ModelParams<f64>, vis: &Array<f64>, tokens: &[usize]) -> Vec<f64> {
    let c = &p.config;
    let d = c.d_model;
    let mut h: Vec<Vec<f64>> = (0..vis.shape()[0]).map(|r| vis.row(r).to_vec()).collect();
    for &t in tokens {
        h.push(p.token_embedding.row(t).to_vec());
    }
    for (i, row) in h.iter_mut().enumerate() {
        for (x, e) in row.iter_mut().zip(p.position_embedding.row(i)) {
            *x += e;
        }
    }
    let n = h.len();
    let dh = d / c.heads;
    for block in &p.blocks {
        let normed: Vec<Vec<f64>> = h
            .iter()
            .map(|r| layer_norm_ref(r, &block.attn_norm_gain, &block.attn_norm_bias, c.layer_norm_eps))
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| linear_ref(r, &block.query)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| linear_ref(r, &block.key)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| linear_ref(r, &block.value)).collect();
        let mut att = vec![vec![0.0; d]; n];
        for head in 0..c.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|cc| q[i][cc] * k[j][cc]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    let w = (scores[j] - m).exp() / z;
                    for cc in cols.clone() {
                        att[i][cc] += w * v[j][cc];
                    }
                }
            }
        }
        for i in 0..n {
            let o = linear_ref(&att[i], &block.output);
            for (x, y) in h[i].iter_mut().zip(o) {
                *x += y;
            }
            let nn = layer_norm_ref(&h[i], &block.mlp_norm_gain, &block.mlp_norm_bias, c.layer_norm_eps);
            let mid: Vec<f64> = linear_ref(&nn, &block.mlp_in).into_iter().map(gelu_ref).collect();
            let out = linear_ref(&mid, &block.mlp_out);
            for (x, y) in h[i].iter_mut().zip(out) {
                *x += y;
            }
        }
    }
    let last = layer_norm_ref(&h[n - 1], &p.final_norm_gain, &p.final_norm_bias, c.layer_norm_eps);
    linear_ref(&last, &p.lm_head)
}

#[test]
fn zero_projection_gives_zero_embedding() {
    let cfg = small_config();
    let proj = VisualProjection::<f64>::zeros(cfg.visual_tokens, cfg.d_model, &[5, 6, 16]);
    let emb = encode_image(&feature(5, 1), &proj).unwrap();
    assert_eq!(emb.0.shape(), &[2, 8]);
    assert!(emb.0.data().iter().all(|&x| x == 0.0));
}

#[test]
fn identical_projections_encode_identically() {
    let cfg = small_config();
    let pair = ProjectionPair::identical(&VisualProjection::<f64>::init(&cfg, &mut Rng::new(4)));
    let v = feature(5, 2);
    let a = encode_image(&v, &pair.positive).unwrap();
    let b = encode_image(&v, &pair.negative).unwrap();
    assert!(a.0.bits_eq(&b.0));
}

#[test]
fn encode_image_matches_straight_line_recompute() {
    let cfg = small_config();
    let proj = VisualProjection::<f64>::init(&cfg, &mut Rng::new(9));
    let v = feature(5, 3);
    let hidden: Vec<f64> = linear_ref(&v.0, &proj.layers[0]).into_iter().map(gelu_ref).collect();
    let out = linear_ref(&hidden, &proj.layers[1]);
    let emb = encode_image(&v, &proj).unwrap();
    for (a, b) in emb.0.data().iter().zip(&out) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encode_image_rejects_wrong_dimension() {
    let cfg = small_config();
    let proj = VisualProjection::<f64>::init(&cfg, &mut Rng::new(9));
    let err = encode_image(&feature(4, 3), &proj).unwrap_err();
    assert!(matches!(err, crate::Error::Dimension { expected: 5, got: 4, .. }));
}

#[test]
fn forward_logits_matches_manual_one_block_model() {
    // Built at |V| = 4 (the validated minimum) and then cut down to three
    // tokens by hand.
    let cfg = ModelConfig {
        vocab_size: 4,
        d_model: 2,
        layers: 1,
        heads: 1,
        mlp_hidden: 3,
        visual_tokens: 1,
        image_dim: 2,
        max_context: 8,
        projection: ProjectionKind::Linear,
        projection_hidden: 0,
        init_std: 0.7,
        layer_norm_eps: 1e-5,
    };
    let mut rng = Rng::new(21);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    params.config.vocab_size = 3;
    params.token_embedding =
        Array::matrix(3, 2, params.token_embedding.data()[..6].to_vec()).unwrap();
    let head: Vec<f64> = params.lm_head.weight.data().chunks(4).flat_map(|r| r[..3].to_vec()).collect();
    params.lm_head.weight = Array::matrix(2, 3, head).unwrap();
    // Non-trivial norms and biases so every term of the block is exercised.
    params.blocks[0].attn_norm_gain = Array::vector(vec![1.3, -0.4]);
    params.blocks[0].mlp_norm_bias = Array::vector(vec![0.2, 0.1]);
    params.blocks[0].query.bias = Array::vector(vec![0.05, -0.3]);
    params.lm_head.bias = Array::vector(vec![0.1, 0.0, -0.2]);
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let vis = encode_image(&ImageFeature(vec![0.6, -1.1]), &proj).unwrap();
    let x = [1, 2];
    let y = [0];
    let got = forward_logits(&params, &vis, &x, &y).unwrap();
    let want = naive_last_logits(&params, &vis.0, &[1, 2, 0]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn forward_logits_matches_manual_default_shape() {
    let cfg = small_config();
    let mut rng = Rng::new(5);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let vis = encode_image(&feature(5, 6), &proj).unwrap();
    let got = forward_logits(&params, &vis, &[1, 4], &[7, 3, 2]).unwrap();
    let want = naive_last_logits(&params, &vis.0, &[1, 4, 7, 3, 2]);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn forward_logits_rejects_context_overflow() {
    let cfg = small_config();
    let mut rng = Rng::new(5);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let vis = encode_image(&feature(5, 6), &proj).unwrap();
    let err = forward_logits(&params, &vis, &[1; 10], &[2; 5]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2 visual") && msg.contains("10 prompt") && msg.contains("5 response"), "{msg}");
}

#[test]
fn sequence_log_prob_of_empty_response_is_zero() {
    let cfg = small_config();
    let mut rng = Rng::new(5);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    assert_eq!(sequence_log_prob(&params, &proj, &[1], &feature(5, 1), &[]).unwrap(), 0.0);
}

#[test]
fn uniform_model_log_prob_is_length_times_log_vocab() {
    let cfg = small_config();
    let mut rng = Rng::new(5);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    params.lm_head = Linear::zeros(cfg.d_model, cfg.vocab_size);
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let lp = sequence_log_prob(&params, &proj, &[1, 2], &feature(5, 1), &[3, 4, 5, 6, 2]).unwrap();
    assert!((lp - (-11.512_925_464_970_229)).abs() < 1e-12, "{lp}");
}

#[test]
fn sequence_log_prob_equals_stepwise_sum() {
    let cfg = small_config();
    let mut rng = Rng::new(8);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let v = feature(5, 4);
    let (x, y) = ([1, 7], [3, 9, 0, 2]);
    let vis = encode_image(&v, &proj).unwrap();
    let mut expected = 0.0;
    for t in 0..y.len() {
        let logits = forward_logits(&params, &vis, &x, &y[..t]).unwrap();
        let z = logits.data();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        expected += z[y[t]] - lse;
    }
    let got = sequence_log_prob(&params, &proj, &x, &v, &y).unwrap();
    assert!((got - expected).abs() < 1e-10);
}

#[test]
fn sequence_log_prob_rejects_invalid_token() {
    let cfg = small_config();
    let mut rng = Rng::new(8);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let err = sequence_log_prob(&params, &proj, &[1], &feature(5, 4), &[3, 10]).unwrap_err();
    assert!(matches!(err, crate::Error::InvalidToken { id: 10, vocab: 10 }));
}

#[test]
fn logits_are_deterministic() {
    let cfg = small_config();
    let mut rng = Rng::new(8);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let vis = encode_image(&feature(5, 4), &proj).unwrap();
    let a = forward_logits(&params, &vis, &[1], &[4, 5]).unwrap();
    let b = forward_logits(&params, &vis, &[1], &[4, 5]).unwrap();
    assert!(a.bits_eq(&b));
}

#[test]
fn snapshot_is_independent_of_later_updates() {
    let cfg = small_config();
    let mut rng = Rng::new(8);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let snap = params.snapshot();
    assert!(snap.bits_eq(&params));
    for t in params.tensors_mut() {
        t.data_mut()[0] += 1.0;
    }
    assert!(!snap.bits_eq(&params));
    assert_eq!(snap, ModelParams::<f64>::init(&cfg, &mut Rng::new(8)).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_config();
    let mut rng = Rng::new(13);
    let model = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let mut projections = std::collections::BTreeMap::new();
    projections.insert("sft".to_string(), VisualProjection::init(&cfg, &mut rng));
    projections.insert(
        "negative".to_string(),
        VisualProjection::init(&ModelConfig { projection: ProjectionKind::Linear, ..cfg.clone() }, &mut rng),
    );
    let ckpt = Checkpoint {
        stage: "sft".into(),
        seed: 77,
        metadata: serde_json::json!({"steps": 3}),
        model,
        projections,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    assert!(loaded.model.bits_eq(&ckpt.model));
    for (name, p) in &ckpt.projections {
        assert!(loaded.projections[name].bits_eq(p));
    }
    assert_eq!(loaded.seed, 77);
    assert_eq!(loaded.to_bytes().unwrap(), ckpt.to_bytes().unwrap());

    let narrow = Checkpoint::<f32> {
        stage: ckpt.stage.clone(),
        seed: ckpt.seed,
        metadata: ckpt.metadata.clone(),
        model: ckpt.model.cast(),
        projections: ckpt.projections.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
    };
    let back = Checkpoint::<f32>::from_bytes(&narrow.to_bytes().unwrap(), "mem").unwrap();
    assert!(back.model.bits_eq(&narrow.model));
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(Checkpoint::<f64>::from_bytes(b"not a checkpoint", "mem").is_err());
}

#[test]
fn f32_model_runs_close_to_f64() {
    let cfg = small_config();
    let mut rng = Rng::new(3);
    let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
    let v = feature(5, 2);
    let wide = sequence_log_prob(&params, &proj, &[1], &v, &[4, 2]).unwrap();
    let narrow = sequence_log_prob(&params.cast::<f32>(), &proj.cast::<f32>(), &[1], &v, &[4, 2]).unwrap();
    assert!((wide - narrow as f64).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn future_tokens_never_change_earlier_logits(
        seed in 0u64..1000,
        prefix in prop::collection::vec(0usize..10, 1..5),
        suffix in prop::collection::vec(0usize..10, 1..4),
    ) {
        let cfg = small_config();
        let mut rng = Rng::new(seed);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
        let vis = encode_image(&feature(5, seed), &proj).unwrap();
        let short = forward_logits(&params, &vis, &[1], &prefix).unwrap();

        let mut full = vec![1];
        full.extend(&prefix);
        full.extend(&suffix);
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, false);
        let visual = tape.param(&vis.0, false);
        let logits = transformer_logits(&mut tape, &model, &cfg, visual, &full).unwrap();
        let row = tape.value(logits).row(cfg.visual_tokens + prefix.len());
        for (a, b) in short.data().iter().zip(row) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sequence_log_prob_is_non_positive(
        seed in 0u64..1000,
        y in prop::collection::vec(0usize..10, 1..6),
    ) {
        let cfg = small_config();
        let mut rng = Rng::new(seed);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let proj = VisualProjection::<f64>::init(&cfg, &mut rng);
        let lp = sequence_log_prob(&params, &proj, &[1], &feature(5, seed), &y).unwrap();
        prop_assert!(lp < 0.0);
    }
}
