//! Token-removal faithfulness: patch-top / recover-top interventions scored
//! by the relative change in target probability.

use serde::{Deserialize, Serialize};

use super::baselines::{baseline_scores, BaselineMethod};
use crate::attribution::logit_attribution;
use crate::dataset::Example;
use crate::decomposed::{run_decomposed, ApportionRule, InitSpec, RunOptions};
use crate::error::{Error, Result};
use crate::model_io::{WeightSet, BOS_ID};
use crate::scalar::Scalar;
use crate::transformer::{forward, greedy_argmax, next_token_distribution, ForwardTrace};

/// `|p_orig − p_pert| / p_orig`
pub fn delta_p(p_orig: f64, p_pert: f64) -> Result<f64> {
    if !(p_orig > 0.0) {
        return Err(Error::Evaluation(format!("delta_p undefined for p_orig = {p_orig}")));
    }
    Ok((p_orig - p_pert).abs() / p_orig)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// Remove the top-scored tokens.
    PatchTop,
    /// Keep only the top-scored tokens.
    RecoverTop,
}

impl InterventionKind {
    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::PatchTop => "patch_top",
            InterventionKind::RecoverTop => "recover_top",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Fraction of eligible tokens in `(0, 1]`.
    pub k: f64,
    pub keep_bos: bool,
}

impl InterventionSpec {
    pub fn new(kind: InterventionKind, k: f64) -> Result<Self> {
        if !(k > 0.0 && k <= 1.0) {
            return Err(Error::Usage(format!("intervention fraction {k} outside (0, 1]")));
        }
        Ok(Self {
            kind,
            k,
            keep_bos: true,
        })
    }
}

/// `⌈k·n⌉`, with a small slack so that e.g. `0.3·10` does not round to 4.
pub fn intervention_count(k: f64, n_eff: usize) -> usize {
    ((k * n_eff as f64 - 1e-9).ceil().max(0.0) as usize).min(n_eff)
}

/// Eligible positions ordered from highest to lowest score; equal scores keep
/// the lower position first.
fn ranked_positions(tokens: &[usize], scores: &[f64], keep_bos: bool) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..tokens.len())
        .filter(|&i| !(keep_bos && i == 0 && tokens[0] == BOS_ID))
        .collect();
    eligible.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    eligible
}

/// Positions that survive `spec`, in original order.
pub fn surviving_positions(tokens: &[usize], scores: &[f64], spec: &InterventionSpec) -> Result<Vec<usize>> {
    if scores.len() != tokens.len() {
        return Err(Error::Input(format!(
            "{} scores for {} tokens",
            scores.len(),
            tokens.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN attribution score".into()));
    }
    if !(spec.k > 0.0 && spec.k <= 1.0) {
        return Err(Error::Usage(format!("intervention fraction {} outside (0, 1]", spec.k)));
    }
    let ranked = ranked_positions(tokens, scores, spec.keep_bos);
    let count = intervention_count(spec.k, ranked.len());
    let mut top = vec![false; tokens.len()];
    for &i in &ranked[..count] {
        top[i] = true;
    }
    let eligible: Vec<bool> = {
        let mut e = vec![false; tokens.len()];
        ranked.iter().for_each(|&i| e[i] = true);
        e
    };
    let kept: Vec<usize> = (0..tokens.len())
        .filter(|&i| match spec.kind {
            InterventionKind::PatchTop => !top[i],
            InterventionKind::RecoverTop => top[i] || !eligible[i],
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Intervention("no tokens left after removal".into()));
    }
    Ok(kept)
}

/// Removes tokens per `spec` and reassembles the remainder in order.
pub fn apply_token_intervention(tokens: &[usize], scores: &[f64], spec: &InterventionSpec) -> Result<Vec<usize>> {
    Ok(surviving_positions(tokens, scores, spec)?
        .into_iter()
        .map(|i| tokens[i])
        .collect())
}

/// Per-token scoring used to drive interventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScoreMethod {
    /// Token-wise decomposition scored against the target logit.
    Depass(ApportionRule),
    Baseline(BaselineMethod),
    /// Every token scores the same; the removal set depends only on position.
    Constant,
}

impl TokenScoreMethod {
    pub fn name(self) -> String {
        match self {
            TokenScoreMethod::Depass(ApportionRule::Softmax) => "depass".into(),
            TokenScoreMethod::Depass(rule) => format!("depass_{}", rule.name().replace('-', "_")),
            TokenScoreMethod::Baseline(b) => b.name().into(),
            TokenScoreMethod::Constant => "constant".into(),
        }
    }
}

impl std::str::FromStr for TokenScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depass" | "depass_softmax" => Ok(Self::Depass(ApportionRule::Softmax)),
            "depass_linear_norm" => Ok(Self::Depass(ApportionRule::LinearNorm)),
            "depass_linear_weighted" => Ok(Self::Depass(ApportionRule::LinearWeighted)),
            "constant" => Ok(Self::Constant),
            other => other
                .parse::<BaselineMethod>()
                .map(Self::Baseline)
                .map_err(|_| Error::Usage(format!("unknown token scoring method {other:?}"))),
        }
    }
}

/// Per-position scores for predicting `target` at the last position.
pub fn token_scores<T: Scalar>(
    method: TokenScoreMethod,
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    target: usize,
) -> Result<Vec<f64>> {
    match method {
        TokenScoreMethod::Depass(rule) => {
            let n = trace.seq_len();
            let run = run_decomposed(trace, weights, &InitSpec::token_wise(n), &RunOptions::with_rule(rule))?;
            if target >= weights.config().vocab_size {
                return Err(Error::Input(format!("target {target} outside vocabulary")));
            }
            let s = logit_attribution(&run.final_normed, weights.lm_head.row(target), &[n - 1])?;
            Ok(s.into_iter().next().unwrap_or_default())
        }
        TokenScoreMethod::Baseline(b) => Ok(baseline_scores(trace, b)),
        TokenScoreMethod::Constant => Ok(vec![0.0; trace.seq_len()]),
    }
}

/// Probability of `target` at the last position.
pub fn target_probability<T: Scalar>(trace: &ForwardTrace<T>, target: usize) -> Result<f64> {
    let p = next_token_distribution(trace.last_logits())?;
    p.get(target)
        .map(|v| v.as_f64())
        .ok_or_else(|| Error::Input(format!("target {target} outside vocabulary")))
}

/// Indices of examples whose greedy prediction equals the target.
pub fn correct_examples<T: Scalar>(weights: &WeightSet<T>, dataset: &[Example]) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        let trace = forward(&ex.tokens, weights)?;
        if greedy_argmax(trace.last_logits())? == ex.target {
            keep.push(i);
        }
    }
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub method: String,
    pub kind: InterventionKind,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Dataset indices of the scored (correctly predicted) examples.
    pub examples: Vec<usize>,
    /// `per_example[g][e]` for `grid[g]` and `examples[e]`.
    pub per_example: Vec<Vec<f64>>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessConfig {
    pub methods: Vec<TokenScoreMethod>,
    pub kinds: Vec<InterventionKind>,
    pub grid: Vec<f64>,
    pub keep_bos: bool,
}

/// One curve per (method, kind), in that nesting order.
pub fn run_faithfulness<T: Scalar>(
    weights: &WeightSet<T>,
    dataset: &[Example],
    cfg: &FaithfulnessConfig,
) -> Result<Vec<FaithfulnessCurve>> {
    for &k in &cfg.grid {
        InterventionSpec::new(InterventionKind::PatchTop, k)?;
    }
    let mut kept = Vec::new();
    let mut traces = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        let trace = forward(&ex.tokens, weights)?;
        if greedy_argmax(trace.last_logits())? == ex.target {
            kept.push(i);
            traces.push(trace);
        }
    }
    if kept.is_empty() {
        return Err(Error::Evaluation("no correctly predicted examples to score".into()));
    }

    let mut curves = Vec::new();
    for &method in &cfg.methods {
        let mut scored = Vec::with_capacity(kept.len());
        for (&i, trace) in kept.iter().zip(&traces) {
            let ex = &dataset[i];
            let scores = token_scores(method, trace, weights, ex.target)?;
            scored.push((scores, target_probability(trace, ex.target)?));
        }
        for &kind in &cfg.kinds {
            let mut per_example = Vec::with_capacity(cfg.grid.len());
            for &k in &cfg.grid {
                let spec = InterventionSpec {
                    kind,
                    k,
                    keep_bos: cfg.keep_bos,
                };
                let mut row = Vec::with_capacity(kept.len());
                for (&i, (scores, p_orig)) in kept.iter().zip(&scored) {
                    let ex = &dataset[i];
                    let new_tokens = apply_token_intervention(&ex.tokens, scores, &spec)?;
                    let dp = if new_tokens == ex.tokens {
                        0.0
                    } else {
                        let t = forward(&new_tokens, weights)?;
                        delta_p(*p_orig, target_probability(&t, ex.target)?)?
                    };
                    row.push(dp);
                }
                per_example.push(row);
            }
            curves.push(FaithfulnessCurve {
                method: method.name(),
                kind,
                grid: cfg.grid.clone(),
                mean: per_example.iter().map(|r| mean(r)).collect(),
                examples: kept.clone(),
                per_example,
            });
        }
    }
    Ok(curves)
}

/// CSV with columns `method, K_or_k, mean_metric, n_examples`; the method
/// column carries `name/kind`.
pub fn faithfulness_csv(curves: &[FaithfulnessCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "K_or_k", "mean_metric", "n_examples"])?;
    for c in curves {
        for (k, m) in c.grid.iter().zip(&c.mean) {
            w.write_record([
                format!("{}/{}", c.method, c.kind.name()),
                k.to_string(),
                m.to_string(),
                c.examples.len().to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
