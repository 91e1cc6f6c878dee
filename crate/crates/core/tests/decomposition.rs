mod common;

use common::{fixture, prompt};
use dfp::attribution::{
    completeness_error, component_importance, direction_attribution, logit_attribution, ImportanceMethod, Positions,
    Target,
};
use dfp::decomposed::{head_outputs, init_decomposition, run_decomposed, ApportionRule, InitSpec, RunOptions, Stage};
use dfp::eval::{ablation_oracle_neurons, depass_neuron_scores};
use dfp::model_io::WeightSet;
use dfp::probes::projection_from_directions;
use dfp::transformer::{forward, greedy_argmax};
use dfp::{Error, Matrix};
use proptest::prelude::*;

fn logit_scores(ws: &WeightSet<f64>, tokens: &[usize], spec: &InitSpec<f64>, opts: &RunOptions, y: usize) -> Vec<f64> {
    let trace = forward(tokens, ws).unwrap();
    let run = run_decomposed(&trace, ws, spec, opts).unwrap();
    logit_attribution(&run.final_normed, ws.lm_head.row(y), &[tokens.len() - 1])
        .unwrap()
        .remove(0)
}

#[test]
fn batching_does_not_change_results() {
    let ws = fixture::<f64>();
    let tokens = prompt(21, 14, 97);
    for rule in ApportionRule::ALL {
        let full = RunOptions::with_rule(rule);
        let one = RunOptions {
            component_batch: 1,
            ..RunOptions::with_rule(rule)
        };
        let three = RunOptions {
            component_batch: 3,
            ..RunOptions::with_rule(rule)
        };
        let spec = InitSpec::token_wise(14);
        let a = logit_scores(&ws, &tokens, &spec, &full, 5);
        assert_eq!(a, logit_scores(&ws, &tokens, &spec, &one, 5));
        assert_eq!(a, logit_scores(&ws, &tokens, &spec, &three, 5));
    }
}

#[test]
fn group_order_permutes_scores() {
    let ws = fixture::<f64>();
    let tokens = prompt(22, 10, 97);
    let groups: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3, 4], vec![5], vec![6, 7, 8, 9]];
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<Vec<usize>> = perm.iter().map(|&p| groups[p].clone()).collect();
    for rule in ApportionRule::ALL {
        let opts = RunOptions::with_rule(rule);
        let a = logit_scores(&ws, &tokens, &InitSpec::TokenWise { groups: groups.clone() }, &opts, 9);
        let b = logit_scores(
            &ws,
            &tokens,
            &InitSpec::TokenWise {
                groups: permuted.clone(),
            },
            &opts,
            9,
        );
        for (k, &p) in perm.iter().enumerate() {
            assert!((b[k] - a[p]).abs() < 1e-12, "{rule:?}");
        }
    }
}

#[test]
fn head_components_sum_to_attention_output() {
    let ws = fixture::<f64>();
    let trace = forward(&prompt(23, 9, 97), &ws).unwrap();
    let l = 1;
    let heads = head_outputs(&trace.layers[l], ws.layer(l), ws.config());
    let mut total = trace.layers[l].hidden_in.clone();
    heads.iter().for_each(|h| total.add_assign(h));
    assert!(total.max_abs_diff(&trace.layers[l].attn_state) < 1e-12);
    let init = init_decomposition(&trace, &ws, &InitSpec::AttentionHeads { layer: l }).unwrap();
    assert_eq!(init.labels().last().map(String::as_str), Some("residual"));
    assert_eq!(init.point().stage, Stage::PostAttention);
}

#[test]
fn direction_completeness_at_every_position_f32() {
    let ws = fixture::<f32>();
    let tokens = prompt(77, 16, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let opts = RunOptions {
        snapshot_layers: [0usize, 1, 2, 3].into_iter().collect(),
        ..RunOptions::default()
    };
    let run = run_decomposed(&trace, &ws, &InitSpec::token_wise(16), &opts).unwrap();
    let v: Vec<f32> = (0..64).map(|d| ((d * 37 % 11) as f32 - 5.0) / 5.0).collect();
    for l in 0..4 {
        let s = direction_attribution(&run.snapshots[&l], &v, &(0..16).collect::<Vec<_>>()).unwrap();
        for (i, row) in s.iter().enumerate() {
            let exact: f64 = trace.layers[l]
                .hidden_out
                .row(i)
                .iter()
                .zip(&v)
                .map(|(a, b)| (a * b) as f64)
                .sum();
            // error scales with the magnitude of the summed terms, not the sum
            let mag: f64 = row.iter().map(|x| x.abs()).sum::<f64>().max(exact.abs());
            assert!(
                (row.iter().sum::<f64>() - exact).abs() <= 1e-5 * mag,
                "layer {l} position {i}"
            );
        }
    }
}

#[test]
fn unsnapshotted_direction_layer_is_an_error() {
    let ws = fixture::<f64>();
    let tokens = prompt(24, 6, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let spec = InitSpec::token_wise(6);
    let run = run_decomposed(&trace, &ws, &spec, &RunOptions::default()).unwrap();
    let target = Target::Direction {
        layer: 1,
        vector: vec![1.0; 64],
    };
    let err = component_importance(
        &run,
        &trace,
        &ws,
        &spec,
        ImportanceMethod::Depass,
        &target,
        &Positions::Last,
    );
    assert!(matches!(err, Err(Error::Input(_))));
    let bad = Target::Logit { token: 97 };
    assert!(component_importance(
        &run,
        &trace,
        &ws,
        &spec,
        ImportanceMethod::Depass,
        &bad,
        &Positions::Last
    )
    .is_err());
}

#[test]
fn report_completeness_and_target_sensitivity() {
    let ws = fixture::<f64>();
    let tokens = prompt(25, 12, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let spec = InitSpec::token_wise(12);
    let run = run_decomposed(&trace, &ws, &spec, &RunOptions::default()).unwrap();
    let rep = |y| {
        component_importance(
            &run,
            &trace,
            &ws,
            &spec,
            ImportanceMethod::Depass,
            &Target::Logit { token: y },
            &Positions::All,
        )
        .unwrap()
    };
    let a = rep(3);
    let b = rep(4);
    assert!(completeness_error(&a, &trace) < 1e-10);
    assert_eq!(a.scores.len(), 12);
    assert!(a
        .last_scores()
        .iter()
        .zip(b.last_scores())
        .any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn coef_and_norm_methods() {
    let ws = fixture::<f64>();
    let tokens = prompt(26, 8, 97);
    let trace = forward(&tokens, &ws).unwrap();
    let spec = InitSpec::neuron_bins(1, 128, 32);
    let run = run_decomposed(&trace, &ws, &spec, &RunOptions::default()).unwrap();
    let t = Target::Logit { token: 1 };
    let coef = component_importance(&run, &trace, &ws, &spec, ImportanceMethod::Coef, &t, &Positions::Last).unwrap();
    let want: f64 = (0..32).map(|k| trace.layers[1].mlp_act[(7, k)].abs()).sum();
    assert!((coef.last_scores()[0] - want).abs() < 1e-12);
    let norm = component_importance(&run, &trace, &ws, &spec, ImportanceMethod::Norm, &t, &Positions::Last).unwrap();
    assert!(norm.last_scores().iter().all(|&s| s >= 0.0));

    let tw = InitSpec::token_wise(8);
    let run = run_decomposed(&trace, &ws, &tw, &RunOptions::default()).unwrap();
    assert!(matches!(
        component_importance(&run, &trace, &ws, &tw, ImportanceMethod::Coef, &t, &Positions::Last),
        Err(Error::Usage(_))
    ));
}

#[test]
fn dead_neuron_scores_zero() {
    let mut ws = fixture::<f64>();
    let k = 17;
    for l in [2usize, 3] {
        if let dfp::model_io::MlpWeights::Plain { w_up, .. } = &mut ws.layer_mut(l).mlp {
            w_up.row_mut(k).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tokens = prompt(27, 10, 97);
    let y = greedy_argmax(forward(&tokens, &ws).unwrap().last_logits()).unwrap();
    // last layer: the neuron's component is zero and nothing follows
    let (oracle, _) = ablation_oracle_neurons(&ws, &tokens, y, 3).unwrap();
    assert_eq!(oracle[k], 0.0);
    for rule in ApportionRule::ALL {
        let (s, _) = depass_neuron_scores(&ws, &tokens, y, 3, rule).unwrap();
        assert_eq!(s[k], 0.0, "{rule:?}");
    }
    // earlier layer: linear-weighted shares nothing into a zero component
    let (oracle, _) = ablation_oracle_neurons(&ws, &tokens, y, 2).unwrap();
    assert_eq!(oracle[k], 0.0);
    let (s, _) = depass_neuron_scores(&ws, &tokens, y, 2, ApportionRule::LinearWeighted).unwrap();
    assert_eq!(s[k], 0.0);
}

#[test]
fn subspace_parts_sum_to_residual() {
    let ws = fixture::<f64>();
    let trace = forward(&prompt(28, 7, 97), &ws).unwrap();
    let mut dirs = Matrix::zeros(2, 64);
    dirs[(0, 3)] = 1.0;
    dirs[(1, 10)] = -2.0;
    let p = projection_from_directions(&dirs).unwrap();
    let init = init_decomposition(&trace, &ws, &InitSpec::Subspace { layer: 1, projector: p }).unwrap();
    let (par, perp) = (init.component(0), init.component(1));
    for i in 0..7 {
        let dot: f64 = par.row(i).iter().zip(perp.row(i)).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        for d in 0..64 {
            let x = trace.layers[1].hidden_in[(i, d)];
            let want = if d == 3 || d == 10 { x } else { 0.0 };
            assert!((par[(i, d)] - want).abs() < 1e-15);
            assert!((par[(i, d)] + perp[(i, d)] - x).abs() < 1e-15);
        }
    }
}

#[test]
fn mismatched_trace_is_rejected() {
    let ws = fixture::<f64>();
    let other = dfp::model_io::generate_random_model::<f64>(&dfp::model_io::ModelConfig::fixture(), 7).unwrap();
    let trace = forward(&prompt(29, 5, 97), &other).unwrap();
    let err = run_decomposed(&trace, &ws, &InitSpec::token_wise(5), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)));
}

#[test]
fn budget_guard() {
    let ws = fixture::<f64>();
    let trace = forward(&prompt(30, 8, 97), &ws).unwrap();
    let opts = RunOptions {
        max_elements: 100,
        ..RunOptions::default()
    };
    let err = run_decomposed(&trace, &ws, &InitSpec::token_wise(8), &opts).unwrap_err();
    assert!(matches!(err, Error::Budget { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reconstruction_holds_for_random_groupings(
        seed in 0u64..10_000,
        n in 2usize..14,
        cuts in proptest::collection::vec(any::<bool>(), 13),
        rule_idx in 0usize..3,
    ) {
        let ws = fixture::<f64>();
        let tokens = prompt(seed, n, 97);
        let mut groups = vec![vec![0]];
        for i in 1..n {
            if cuts[i - 1] { groups.push(vec![i]) } else { groups.last_mut().unwrap().push(i) }
        }
        let trace = forward(&tokens, &ws).unwrap();
        let opts = RunOptions::with_rule(ApportionRule::ALL[rule_idx]);
        let run = run_decomposed(&trace, &ws, &InitSpec::TokenWise { groups }, &opts).unwrap();
        prop_assert!(run.max_reconstruction_error() <= 1e-10);
    }

    /// Linear-weighted scores are additive under merging any two groups.
    #[test]
    fn linear_weighted_merge_is_additive(seed in 0u64..10_000, n in 3usize..12, a in 0usize..12, b in 0usize..12) {
        let (a, b) = (a % n, b % n);
        prop_assume!(a != b);
        let ws = fixture::<f64>();
        let tokens = prompt(seed, n, 97);
        let opts = RunOptions::with_rule(ApportionRule::LinearWeighted);
        let single = logit_scores(&ws, &tokens, &InitSpec::token_wise(n), &opts, 11);
        let mut groups: Vec<Vec<usize>> = (0..n).filter(|&i| i != a && i != b).map(|i| vec![i]).collect();
        groups.push(vec![a.min(b), a.max(b)]);
        let merged = logit_scores(&ws, &tokens, &InitSpec::TokenWise { groups }, &opts, 11);
        prop_assert!((merged.last().unwrap() - single[a] - single[b]).abs() < 1e-9);
    }
}
