//! Per-neuron ablation oracle and its wall-time comparison with a single
//! decomposed pass.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attribution::logit_attribution;
use crate::decomposed::{run_decomposed, ApportionRule, InitSpec, RunOptions};
use crate::error::{Error, Result};
use crate::model_io::WeightSet;
use crate::scalar::Scalar;
use crate::transformer::{forward, forward_with, Ablation};

fn check_args<T: Scalar>(weights: &WeightSet<T>, layer: usize, target: usize) -> Result<()> {
    let c = weights.config();
    if layer >= c.num_layers {
        return Err(Error::Usage(format!("layer {layer} out of range")));
    }
    if target >= c.vocab_size {
        return Err(Error::Input(format!("target {target} outside vocabulary")));
    }
    Ok(())
}

/// `logit_y(original) − logit_y(neuron k zeroed)` for every neuron of
/// `layer`, one fresh forward per neuron.
pub fn ablation_oracle_neurons<T: Scalar>(
    weights: &WeightSet<T>,
    tokens: &[usize],
    target: usize,
    layer: usize,
) -> Result<(Vec<f64>, Duration)> {
    check_args(weights, layer, target)?;
    let start = Instant::now();
    let base = forward(tokens, weights)?;
    let orig = base.last_logits()[target].as_f64();
    let mut scores = Vec::with_capacity(weights.config().d_mlp);
    for k in 0..weights.config().d_mlp {
        let mut ablation = Ablation::none();
        ablation.neurons.insert((layer, k));
        let t = forward_with(tokens, weights, &ablation)?;
        scores.push(orig - t.last_logits()[target].as_f64());
    }
    Ok((scores, start.elapsed()))
}

/// One component per neuron of `layer` (plus residual), scored against the
/// target logit. Includes the standard pass the decomposition freezes.
pub fn depass_neuron_scores<T: Scalar>(
    weights: &WeightSet<T>,
    tokens: &[usize],
    target: usize,
    layer: usize,
    rule: ApportionRule,
) -> Result<(Vec<f64>, Duration)> {
    check_args(weights, layer, target)?;
    let start = Instant::now();
    let trace = forward(tokens, weights)?;
    let spec = InitSpec::neuron_bins(layer, weights.config().d_mlp, 1);
    let opts = RunOptions {
        check_reconstruction: false,
        ..RunOptions::with_rule(rule)
    };
    let run = run_decomposed(&trace, weights, &spec, &opts)?;
    let mut scores = logit_attribution(&run.final_normed, weights.lm_head.row(target), &[tokens.len() - 1])?
        .pop()
        .unwrap_or_default();
    scores.pop(); // residual
    Ok((scores, start.elapsed()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub layer: usize,
    pub d_mlp: usize,
    pub seq_len: usize,
    pub repeats: usize,
    /// Best-of-`repeats` wall time in seconds.
    pub t_depass: f64,
    pub t_ablation: f64,
    /// `t_ablation / t_depass`
    pub speedup: f64,
}

pub fn bench_depass_vs_ablation<T: Scalar>(
    weights: &WeightSet<T>,
    tokens: &[usize],
    target: usize,
    layer: usize,
    repeats: usize,
) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let mut t_depass = f64::INFINITY;
    let mut t_ablation = f64::INFINITY;
    for _ in 0..repeats {
        let (_, d) = depass_neuron_scores(weights, tokens, target, layer, ApportionRule::Softmax)?;
        t_depass = t_depass.min(d.as_secs_f64());
        let (_, a) = ablation_oracle_neurons(weights, tokens, target, layer)?;
        t_ablation = t_ablation.min(a.as_secs_f64());
    }
    Ok(BenchReport {
        layer,
        d_mlp: weights.config().d_mlp,
        seq_len: tokens.len(),
        repeats,
        t_depass,
        t_ablation,
        speedup: t_ablation / t_depass,
    })
}
