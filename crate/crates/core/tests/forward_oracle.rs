mod common;

use common::{fixture, naive_forward, prompt, rel_err, to_rows, Mix};
use dfp::model_io::{generate_random_model, Activation, MlpKind, ModelConfig};
use dfp::transformer::forward;
use proptest::prelude::*;

#[test]
fn matches_naive_forward_f32() {
    let ws = fixture::<f32>();
    let tokens = prompt(1, 16, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let naive = naive_forward(&ws, &tokens);
    let logits = to_rows(&trace.logits);
    for (a, b) in logits.iter().zip(&naive.logits) {
        assert!(rel_err(a, b) < 1e-5, "{}", rel_err(a, b));
    }
    for (l, h) in naive.hidden.iter().enumerate() {
        for (a, b) in to_rows(&trace.layers[l].hidden_out).iter().zip(h) {
            assert!(rel_err(a, b) < 1e-5);
        }
    }
}

#[test]
fn matches_naive_forward_gated_rope_gqa() {
    let mut c = ModelConfig::fixture();
    c.mlp_kind = MlpKind::Gated;
    c.activation = Activation::Silu;
    c.rope = true;
    c.num_kv_heads = 2;
    let ws = generate_random_model::<f64>(&c, 9).unwrap();
    let tokens = prompt(2, 12, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let naive = naive_forward(&ws, &tokens);
    for (a, b) in to_rows(&trace.logits).iter().zip(&naive.logits) {
        assert!(rel_err(a, b) < 1e-12);
    }
}

#[test]
fn first_embedding_value_from_independent_generator() {
    let c = ModelConfig::fixture();
    let ws = fixture::<f64>();
    let mut r = Mix(42);
    let bound = 1.0 / (c.d_model as f64).sqrt();
    let want = (2.0 * r.unit() - 1.0) * bound;
    assert_eq!(ws.token_embeddings.as_slice()[0], want);
    let want2 = (2.0 * r.unit() - 1.0) * bound;
    assert_eq!(ws.token_embeddings.as_slice()[1], want2);
}

#[test]
fn f32_and_f64_agree() {
    let w64 = fixture::<f64>();
    let w32 = fixture::<f32>();
    let tokens = prompt(3, 16, 97);
    let a = to_rows(&forward(&tokens, &w64).unwrap().logits);
    let b = to_rows(&forward(&tokens, &w32).unwrap().logits);
    for (x, y) in b.iter().zip(&a) {
        assert!(rel_err(x, y) < 1e-3);
    }
}

#[test]
fn generation_is_deterministic() {
    let a = fixture::<f64>();
    let b = fixture::<f64>();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = generate_random_model::<f64>(&ModelConfig::fixture(), 43).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Changing token j leaves every earlier position bit-identical.
    #[test]
    fn causal(seed in 0u64..1000, j in 1usize..12, new in 1usize..97) {
        let ws = fixture::<f64>();
        let tokens = prompt(seed, 12, 97);
        let mut changed = tokens.clone();
        changed[j] = new;
        let a = forward(&tokens, &ws).unwrap();
        let b = forward(&changed, &ws).unwrap();
        for i in 0..j {
            prop_assert_eq!(a.logits.row(i), b.logits.row(i));
            for l in 0..4 {
                prop_assert_eq!(a.layers[l].hidden_out.row(i), b.layers[l].hidden_out.row(i));
            }
        }
    }
}
