use super::*;
use crate::autodiff::Tape;
use proptest::prelude::*;
use rand::Rng;

fn small() -> BackboneConfig {
    BackboneConfig {
        max_positions: 256,
        ..BackboneConfig::sized(2, 16, 2)
    }
}

fn random_tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = Backbone::<f32>::init(small(), 7).unwrap();
    let b = Backbone::<f32>::init(small(), 7).unwrap();
    let c = Backbone::<f32>::init(small(), 8).unwrap();
    for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
        let bits_a: Vec<u32> = pa.value().data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = pb.value().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{}", pa.name());
    }
    assert_ne!(a.layers[0].wq.value(), c.layers[0].wq.value());
    assert!(a.parameters().iter().all(|p| !p.trainable()));
}

#[test]
fn invalid_head_split_is_config_error() {
    let cfg = BackboneConfig {
        d_head: 5,
        ..small()
    };
    assert!(matches!(Backbone::<f32>::init(cfg, 0), Err(Error::Config(_))));
    let cfg = BackboneConfig {
        max_positions: 0,
        ..small()
    };
    assert!(Backbone::<f32>::init(cfg, 0).is_err());
}

#[test]
fn prefill_single_token() {
    let bb = Backbone::<f32>::init(small(), 1).unwrap();
    let (cache, out) = bb.prefill(&[3]).unwrap();
    assert_eq!(cache.len(), 1);
    assert_eq!(out.last_layer_attention.shape(), &[2, 1]);
    let full = bb.forward_full(&[3]).unwrap();
    assert!(full.row(0).iter().zip(out.logits.data()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn prefill_rejects_empty_and_overflow() {
    let bb = Backbone::<f32>::init(small(), 1).unwrap();
    assert!(matches!(bb.prefill(&[]), Err(Error::Contract(_))));
    let long = vec![1u32; 257];
    assert!(matches!(bb.prefill(&long), Err(Error::Capacity { .. })));
    assert!(matches!(bb.forward_full(&long), Err(Error::Capacity { .. })));
}

#[test]
fn attention_rows_are_distributions() {
    let bb = Backbone::<f32>::init(small(), 2).unwrap();
    let (_, out) = bb.prefill(&[1, 2, 3, 4, 5]).unwrap();
    let a = &out.last_layer_attention;
    assert_eq!(a.shape(), &[2, 5]);
    for h in 0..2 {
        let s: f64 = a.row(h).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn prefill_then_decode_matches_full_forward() {
    let bb = Backbone::<f32>::init(small(), 3).unwrap();
    let toks = random_tokens(11, 9, 256);
    let (mut cache, _) = bb.prefill(&toks[..8]).unwrap();
    let out = bb.decode_step(StepInput::Token(toks[8]), &mut cache).unwrap();
    let full = bb.forward_full(&toks).unwrap();
    let delta = full
        .row(8)
        .iter()
        .zip(out.logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(delta < 1e-5, "delta {delta}");
}

#[test]
fn incremental_matches_full_on_32_tokens() {
    let bb = Backbone::<f32>::init(BackboneConfig::default(), 5).unwrap();
    let toks = random_tokens(3, 32, 256);
    let full = bb.forward_full(&toks).unwrap();
    let (mut cache, mut out) = bb.prefill(&toks[..1]).unwrap();
    for i in 0..32 {
        if i > 0 {
            out = bb.decode_step(StepInput::Token(toks[i]), &mut cache).unwrap();
        }
        for (a, b) in full.row(i).iter().zip(out.logits.data()) {
            assert!((a - b).abs() < 1e-5, "pos {i}: {a} vs {b}");
        }
    }
}

#[test]
fn prefill_is_bitwise_equal_to_token_by_token() {
    let bb = Backbone::<f32>::init(small(), 4).unwrap();
    let toks = random_tokens(9, 20, 256);
    let (batched, out_b) = bb.prefill(&toks).unwrap();
    let (mut inc, mut out_i) = bb.prefill(&toks[..1]).unwrap();
    for &t in &toks[1..] {
        out_i = bb.decode_step(StepInput::Token(t), &mut inc).unwrap();
    }
    for l in 0..2 {
        assert_eq!(batched.keys(l), inc.keys(l));
        assert_eq!(batched.values(l), inc.values(l));
    }
    assert_eq!(out_b.logits, out_i.logits);
    assert_eq!(out_b.last_layer_attention, out_i.last_layer_attention);
    assert_eq!(out_b.last_hidden, out_i.last_hidden);
}

#[test]
fn token_path_equals_latent_path() {
    let bb = Backbone::<f32>::init(small(), 6).unwrap();
    let (mut c1, _) = bb.prefill(&[1, 2, 3]).unwrap();
    let mut c2 = c1.clone();
    let a = bb.decode_step(StepInput::Token(42), &mut c1).unwrap();
    let emb = bb.token_embedding(42).unwrap().to_vec();
    let b = bb.decode_step(StepInput::Latent(&emb), &mut c2).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.last_hidden, b.last_hidden);
    assert_eq!(a.last_layer_attention, b.last_layer_attention);
    assert_eq!(c1.is_latent(), &[false, false, false, false]);
    assert_eq!(c2.is_latent(), &[false, false, false, true]);
}

#[test]
fn decode_appends_and_flags_latents() {
    let bb = Backbone::<f32>::init(small(), 6).unwrap();
    let (mut cache, _) = bb.prefill(&[1, 2, 3, 4]).unwrap();
    let before = cache.len();
    bb.decode_step(StepInput::Token(9), &mut cache).unwrap();
    assert_eq!(cache.len(), before + 1);
    let latent = vec![0.1f32; 16];
    for _ in 0..8 {
        bb.decode_step(StepInput::Latent(&latent), &mut cache).unwrap();
    }
    let flags = cache.is_latent();
    assert_eq!(flags.len(), 13);
    assert!(flags[5..].iter().all(|&f| f));
    assert!(flags[..5].iter().all(|&f| !f));
    assert!(cache.position_ids().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn latent_dimension_mismatch_is_contract_error() {
    let bb = Backbone::<f32>::init(small(), 6).unwrap();
    let (mut cache, _) = bb.prefill(&[1]).unwrap();
    let bad = vec![0.0f32; 15];
    assert!(matches!(bb.decode_step(StepInput::Latent(&bad), &mut cache), Err(Error::Contract(_))));
    assert_eq!(cache.len(), 1);
}

#[test]
fn causal_future_changes_do_not_leak() {
    let bb = Backbone::<f64>::init(small(), 8).unwrap();
    let mut toks = random_tokens(1, 12, 256);
    let a = bb.forward_full(&toks).unwrap();
    toks[9] = (toks[9] + 17) % 256;
    let b = bb.forward_full(&toks).unwrap();
    for i in 0..9 {
        assert_eq!(a.row(i), b.row(i));
    }
    assert_ne!(a.row(9), b.row(9));
}

#[test]
fn tracked_forward_is_bitwise_equal_to_inference() {
    let bb = Backbone::<f64>::init(small(), 12).unwrap();
    let toks = random_tokens(2, 10, 256);
    let (prefix, _) = bb.prefill(&toks[..6]).unwrap();
    let mut tape = Tape::new();
    let x = bb.embed_tracked(&mut tape, &toks[6..]).unwrap();
    let logits = bb.forward_tracked(&mut tape, &prefix, x).unwrap();
    let mut cache = prefix.clone();
    for (i, &t) in toks[6..].iter().enumerate() {
        let out = bb.decode_step(StepInput::Token(t), &mut cache).unwrap();
        assert_eq!(tape.value(logits).row(i), out.logits.data());
    }
}

#[test]
fn forward_calls_are_counted() {
    let bb = Backbone::<f32>::init(small(), 1).unwrap();
    assert_eq!(bb.forward_calls(), 0);
    let (mut c, _) = bb.prefill(&[1, 2]).unwrap();
    bb.decode_step(StepInput::Token(3), &mut c).unwrap();
    bb.forward_full(&[1]).unwrap();
    assert_eq!(bb.forward_calls(), 3);
}

#[test]
fn greedy_decode_matches_argmax_of_full_forward() {
    let bb = Backbone::<f64>::init(small(), 21).unwrap();
    let prompt = random_tokens(4, 5, 256);
    let gen = bb.greedy_decode(&prompt, 6).unwrap();
    let mut seq = prompt.clone();
    for &g in &gen {
        let full = bb.forward_full(&seq).unwrap();
        assert_eq!(argmax(full.row(seq.len() - 1)) as u32, g);
        seq.push(g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_equals_full_f64(seed in 0u64..1000, len in 1usize..48) {
        let bb = Backbone::<f64>::init(small(), seed).unwrap();
        let toks = random_tokens(seed + 1, len, 256);
        let full = bb.forward_full(&toks).unwrap();
        let (mut cache, mut out) = bb.prefill(&toks[..1]).unwrap();
        for i in 0..len {
            if i > 0 {
                out = bb.decode_step(StepInput::Token(toks[i]), &mut cache).unwrap();
            }
            for (a, b) in full.row(i).iter().zip(out.logits.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
        prop_assert_eq!(cache.byte_count(), 2 * len * 16 * 2 * 8);
    }
}
