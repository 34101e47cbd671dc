use std::cell::RefCell;

use super::*;
use crate::model::{ModelConfig, Policy};
use crate::world::vocab;

fn tiny_config(init_std: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 8,
        layers: 1,
        heads: 2,
        mlp_hidden: 16,
        visual_tokens: 2,
        image_dim: 6,
        max_context: 24,
        projection_hidden: 8,
        init_std,
        ..ModelConfig::default()
    }
}

fn random_input(seed: u64) -> (Policy<f64>, VisualProjection<f64>, TokenSequence, ImageFeature) {
    let mut rng = Rng::new(seed);
    let policy = Policy::init(&tiny_config(0.5), &mut rng.derive("policy")).unwrap();
    let other = VisualProjection::init(&tiny_config(0.5), &mut rng.derive("other"));
    let x = vec![vocab::BOS, vocab::ASK_DESCRIBE + rng.below(3), vocab::QUERY];
    let v = ImageFeature((0..6).map(|_| rng.normal()).collect());
    (policy, other, x, v)
}

fn table_decoder(
    table: impl Fn(&[Token]) -> Vec<f64>,
) -> impl FnMut(&[Token]) -> Result<Array<f64>> {
    move |prefix| Ok(Array::vector(table(prefix)))
}

type NoStream = fn(&[Token]) -> Result<Array<f64>>;

#[test]
fn combine_matches_direct_substitution() {
    let w = Array::vector(vec![2.0, 1.0]);
    let l = Array::vector(vec![1.0, 2.0]);
    assert_eq!(contrastive_combine(&w, &l, 1.0).unwrap().data(), &[3.0, 0.0]);
    let zero = contrastive_combine(&w, &l, 0.0).unwrap();
    assert!(zero.bits_eq(&w));
    assert!(contrastive_combine(&w, &Array::vector(vec![1.0]), 1.0).is_err());
}

#[test]
fn combine_shifts_with_a_common_constant() {
    let w = Array::vector(vec![0.5, -1.25, 3.0]);
    let l = Array::vector(vec![1.5, 0.25, -2.0]);
    let c = 4.0;
    for alpha in [0.5, 1.0, 2.0] {
        let base = contrastive_combine(&w, &l, alpha).unwrap();
        let shifted = contrastive_combine(&w.map(|x| x + c), &l.map(|x| x + c), alpha).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert_eq!(*b, a + c);
        }
    }
}

#[test]
fn suppression_grows_with_alpha() {
    // Token 1: logit_l exceeds logit_w by δ = 0.75.
    let w = Array::vector(vec![0.2, 1.0]);
    let l = Array::vector(vec![0.2, 1.75]);
    let mut last = f64::INFINITY;
    for alpha in [0.0, 0.1, 0.5, 1.0, 2.0, 4.0] {
        let out = contrastive_combine(&w, &l, alpha).unwrap().data()[1];
        assert!(out < last);
        last = out;
    }
}

#[test]
fn ties_break_to_the_lowest_id() {
    assert_eq!(argmax(&[0.3, 0.9, 0.9, 0.1]), 1);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
}

#[test]
fn greedy_follows_hand_traced_path() {
    // Logits as a function of the prefix; EOS is token 2.
    let table = |prefix: &[Token]| match prefix {
        [] => vec![0.1, 0.5, 0.2, 0.4],
        [1] => vec![0.9, 0.1, 0.3, 0.9],
        [1, 0] => vec![0.0, 0.0, 1.0, 0.0],
        _ => unreachable!("decoding should stop at EOS"),
    };
    let out = contrastive_decode(8, 0.0, None, &mut Rng::new(0), table_decoder(table), None::<NoStream>).unwrap();
    assert_eq!(out, vec![1, 0, vocab::EOS]);
}

#[test]
fn constructed_contrast_flips_the_choice() {
    let w = |_: &[Token]| vec![1.0, 1.1, 0.0];
    let l = |_: &[Token]| vec![0.0, 2.0, 0.0];
    let combined: Array<f64> = contrastive_combine(&Array::vector(w(&[])), &Array::vector(l(&[])), 1.0).unwrap();
    assert!((combined.data()[0] - 2.0).abs() < 1e-12 && (combined.data()[1] - 0.2).abs() < 1e-12);
    let greedy = contrastive_decode(1, 1.0, None, &mut Rng::new(0), table_decoder(w), None::<NoStream>).unwrap();
    let dcd = contrastive_decode(1, 1.0, None, &mut Rng::new(0), table_decoder(w), Some(table_decoder(l))).unwrap();
    assert_eq!(greedy, vec![1]);
    assert_eq!(dcd, vec![0]);
}

#[test]
fn eos_first_model_returns_eos() {
    let (mut policy, _, x, v) = random_input(1);
    policy.model.lm_head.weight = Array::zeros(policy.model.lm_head.weight.shape());
    policy.model.lm_head.bias.data_mut()[vocab::EOS] = 5.0;
    let out = greedy_decode(&policy.model, &policy.projection, &x, &v, &DecodeConfig::default()).unwrap();
    assert_eq!(out, vec![vocab::EOS]);
}

#[test]
fn responses_stop_at_max_len_or_context() {
    let (mut policy, _, x, v) = random_input(2);
    policy.model.lm_head.weight = Array::zeros(policy.model.lm_head.weight.shape());
    policy.model.lm_head.bias.data_mut()[vocab::YES] = 5.0;
    let c = DecodeConfig::greedy(5);
    assert_eq!(greedy_decode(&policy.model, &policy.projection, &x, &v, &c).unwrap(), vec![vocab::YES; 5]);
    // 2 visual + 3 prompt tokens leave room for 19 response tokens.
    let long = DecodeConfig::greedy(100);
    assert_eq!(greedy_decode(&policy.model, &policy.projection, &x, &v, &long).unwrap().len(), 19);
}

#[test]
fn decoding_is_deterministic() {
    for seed in 0..5 {
        let (policy, other, x, v) = random_input(seed);
        let pair = ProjectionPair { positive: policy.projection.clone(), negative: other };
        let c = DecodeConfig { strategy: Strategy::Dcd, ..DecodeConfig::default() };
        let a = decode_dcd(&policy.model, &policy.projection, &pair, &x, &v, &c).unwrap();
        let b = decode_dcd(&policy.model, &policy.projection, &pair, &x, &v, &c).unwrap();
        assert_eq!(a, b);
        let g1 = greedy_decode(&policy.model, &policy.projection, &x, &v, &c).unwrap();
        let g2 = greedy_decode(&policy.model, &policy.projection, &x, &v, &c).unwrap();
        assert_eq!(g1, g2);
    }
}

#[test]
fn perturbation_has_the_requested_variance() {
    let v = ImageFeature(vec![0.25, -1.0, 3.0, 0.0]);
    assert_eq!(perturb_image(&v, 0.0, &mut Rng::new(1)), v);
    assert_eq!(perturb_image(&v, 0.7, &mut Rng::new(1)), perturb_image(&v, 0.7, &mut Rng::new(1)));
    let sigma = 0.7;
    let mut rng = Rng::new(42);
    let mut diffs = Vec::new();
    for _ in 0..10_000 {
        let p = perturb_image(&v, sigma, &mut rng);
        diffs.extend(p.0.iter().zip(&v.0).map(|(a, b)| a - b));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn every_strategy_reduces_to_greedy() {
    for seed in 0..20 {
        let (policy, other, x, v) = random_input(seed);
        let m = &policy.model;
        let proj = &policy.projection;
        let greedy = greedy_decode(m, proj, &x, &v, &DecodeConfig::default()).unwrap();
        let zero = DecodeConfig { alpha: 0.0, ..DecodeConfig::default() };
        let rng = Rng::new(seed);
        let pair = ProjectionPair { positive: proj.clone(), negative: other.clone() };
        let (_, _, _, v_other) = random_input(seed + 1000);
        assert_eq!(decode_vcd(m, proj, &x, &v, &zero, &rng).unwrap(), greedy);
        assert_eq!(decode_dcd(m, proj, &pair, &x, &v, &zero).unwrap(), greedy);
        assert_eq!(decode_other_image(m, proj, &x, &v, &v_other, &zero).unwrap(), greedy);

        let no_noise = DecodeConfig { sigma: 0.0, ..DecodeConfig::default() };
        assert_eq!(decode_vcd(m, proj, &x, &v, &no_noise, &rng).unwrap(), greedy);
        assert_eq!(decode_other_image(m, proj, &x, &v, &v, &DecodeConfig::default()).unwrap(), greedy);
        let same = ProjectionPair::identical(proj);
        for alpha in [0.5, 1.0, 2.0] {
            let c = DecodeConfig { alpha, ..DecodeConfig::default() };
            assert_eq!(decode_dcd(m, proj, &same, &x, &v, &c).unwrap(), greedy);
        }
    }
}

#[test]
fn trained_positive_path_uses_psi() {
    let (policy, other, x, v) = random_input(3);
    let pair = ProjectionPair { positive: other.clone(), negative: other.clone() };
    let c = DecodeConfig { positive_path: PositivePath::TrainedPosProj, ..DecodeConfig::default() };
    let out = decode_dcd(&policy.model, &policy.projection, &pair, &x, &v, &c).unwrap();
    assert_eq!(out, greedy_decode(&policy.model, &other, &x, &v, &c).unwrap());
}

fn shifted_stream<'a>(
    m: &'a ModelParams<f64>,
    vis: &'a VisualEmbedding<f64>,
    x: &'a [Token],
    shifts: Option<&'a [f64]>,
) -> impl FnMut(&[Token]) -> Result<Array<f64>> + 'a {
    move |prefix| {
        let logits = forward_logits(m, vis, x, prefix)?;
        Ok(match shifts {
            Some(s) => logits.map(|z| z + s[prefix.len()]),
            None => logits,
        })
    }
}

#[test]
fn constant_shifts_never_change_the_output() {
    for seed in 0..20 {
        let (policy, other, x, v) = random_input(seed);
        let m = &policy.model;
        let vis_w = encode_image(&v, &policy.projection).unwrap();
        let vis_l = encode_image(&v, &other).unwrap();
        let mut r = Rng::new(seed);
        let shifts: Vec<f64> = (0..32).map(|_| (r.uniform() - 0.5) * 8.0).collect();
        let run = |s: Option<&[f64]>| {
            contrastive_decode(
                16,
                1.0,
                None,
                &mut Rng::new(0),
                shifted_stream(m, &vis_w, &x, s),
                Some(shifted_stream(m, &vis_l, &x, s)),
            )
            .unwrap()
        };
        assert_eq!(run(None), run(Some(&shifts)));
    }
}

#[test]
fn both_streams_see_the_same_prefix() {
    let (policy, other, x, v) = random_input(4);
    let m = &policy.model;
    let vis_w = encode_image(&v, &policy.projection).unwrap();
    let vis_l = encode_image(&v, &other).unwrap();
    let seen_w = RefCell::new(Vec::new());
    let seen_l = RefCell::new(Vec::new());
    contrastive_decode(
        16,
        1.0,
        None,
        &mut Rng::new(0),
        |p: &[Token]| {
            seen_w.borrow_mut().push(p.to_vec());
            forward_logits(m, &vis_w, &x, p)
        },
        Some(|p: &[Token]| {
            seen_l.borrow_mut().push(p.to_vec());
            forward_logits(m, &vis_l, &x, p)
        }),
    )
    .unwrap();
    assert_eq!(seen_w.into_inner(), seen_l.into_inner());
}

/// A broken variant whose negative stream lags one token behind.
fn desynchronized_decode(
    m: &ModelParams<f64>,
    vis_w: &VisualEmbedding<f64>,
    vis_l: &VisualEmbedding<f64>,
    x: &[Token],
) -> TokenSequence {
    let mut y: TokenSequence = Vec::new();
    while y.len() < 16 {
        let w = forward_logits(m, vis_w, x, &y).unwrap();
        let lag = &y[..y.len().saturating_sub(1)];
        let l = forward_logits(m, vis_l, x, lag).unwrap();
        let t = argmax(contrastive_combine(&w, &l, 1.0).unwrap().data());
        y.push(t);
        if t == vocab::EOS {
            break;
        }
    }
    y
}

#[test]
fn desynchronized_streams_are_detected() {
    let mut differs = 0;
    for seed in 0..20 {
        let (policy, other, x, v) = random_input(seed);
        let vis_w = encode_image(&v, &policy.projection).unwrap();
        let vis_l = encode_image(&v, &other).unwrap();
        let pair = ProjectionPair { positive: policy.projection.clone(), negative: other };
        let c = DecodeConfig::default();
        let good = decode_dcd(&policy.model, &policy.projection, &pair, &x, &v, &c).unwrap();
        if desynchronized_decode(&policy.model, &vis_w, &vis_l, &x) != good {
            differs += 1;
        }
    }
    assert!(differs > 0, "the lagging variant went unnoticed on every input");
}

#[test]
fn model_decoder_dispatches_by_strategy() {
    let (policy, other, x, v) = random_input(5);
    let (_, _, _, v_other) = random_input(6);
    let pair = ProjectionPair { positive: policy.projection.clone(), negative: other };
    let request = DecodeRequest { key: 7, x: &x, v: &v, other: &v_other };
    for strategy in [Strategy::Greedy, Strategy::Vcd, Strategy::Dcd, Strategy::OtherImage] {
        let config = DecodeConfig { strategy, ..DecodeConfig::default() };
        let d = ModelDecoder { model: &policy.model, projection: &policy.projection, pair: Some(&pair), config: config.clone(), seed: 9 };
        let got = d.decode(&request).unwrap();
        let rng = Rng::new(9).derive_indexed("response", 7);
        let want = match strategy {
            Strategy::Greedy => greedy_decode(&policy.model, &policy.projection, &x, &v, &config),
            Strategy::Vcd => decode_vcd(&policy.model, &policy.projection, &x, &v, &config, &rng),
            Strategy::Dcd => decode_dcd(&policy.model, &policy.projection, &pair, &x, &v, &config),
            Strategy::OtherImage => decode_other_image(&policy.model, &policy.projection, &x, &v, &v_other, &config),
        }
        .unwrap();
        assert_eq!(got, want, "{strategy:?}");
    }
    let no_pair = ModelDecoder {
        model: &policy.model,
        projection: &policy.projection,
        pair: None,
        config: DecodeConfig { strategy: Strategy::Dcd, ..DecodeConfig::default() },
        seed: 9,
    };
    assert!(matches!(no_pair.decode(&request), Err(Error::MissingDependency(_))));
}

#[test]
fn temperature_sampling_is_seeded() {
    let (policy, _, x, v) = random_input(7);
    let vis = encode_image(&v, &policy.projection).unwrap();
    let c = DecodeConfig { temperature: Some(1.5), ..DecodeConfig::default() };
    let a = decode_embeddings(&policy.model, &x, &vis, None, &c, &Rng::new(3)).unwrap();
    let b = decode_embeddings(&policy.model, &x, &vis, None, &c, &Rng::new(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        DecodeConfig { alpha: -1.0, ..DecodeConfig::default() },
        DecodeConfig { sigma: -0.1, ..DecodeConfig::default() },
        DecodeConfig { max_len: 0, ..DecodeConfig::default() },
        DecodeConfig { temperature: Some(0.0), ..DecodeConfig::default() },
    ] {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn decode_records_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/decodes.jsonl");
    let records = vec![
        DecodeRecord { sample_id: 1, strategy: Strategy::Dcd, alpha: 1.0, tokens: vec![20, 2], text: "cat <eos>".into() },
        DecodeRecord { sample_id: 2, strategy: Strategy::Greedy, alpha: 0.0, tokens: vec![2], text: "<eos>".into() },
    ];
    write_decode_records(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<DecodeRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, records);
    assert!(text.contains("\"strategy\":\"dcd\""));
}

#[test]
fn pinned_fixture_outputs() {
    let (policy, _, x, v) = random_input(21);
    let (_, _, _, v_other) = random_input(22);
    let m = &policy.model;
    let proj = &policy.projection;
    let c = DecodeConfig { sigma: 2.0, ..DecodeConfig::default() };
    let greedy = greedy_decode(m, proj, &x, &v, &c).unwrap();
    let vcd = decode_vcd(m, proj, &x, &v, &c, &Rng::new(5)).unwrap();
    let other = decode_other_image(m, proj, &x, &v, &v_other, &c).unwrap();
    // Recorded from this seeded run.
    assert_eq!(greedy, [7, 19, 21, 3, 19, 19, 19, 21, 15, 21, 21, 19, 21, 15, 12, 3]);
    assert_eq!(vcd, [7, 21, 21, 3, 19, 19, 19, 19, 21, 15, 21, 19, 21, 21, 19, 19]);
    assert_eq!(other, [7, 19, 21, 3, 3, 3, 19, 21, 15, 18, 12, 3, 18, 13, 4, 18]);
}
