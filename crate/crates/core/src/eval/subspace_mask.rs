//! Probe-guided prompt masking: remove the input tokens that contribute most
//! to the untruthful direction at flagged positions.

use serde::{Deserialize, Serialize};

use super::faithfulness::intervention_count;
use crate::attribution::direction_attribution;
use crate::decomposed::{run_decomposed, ApportionRule, InitSpec, RunOptions};
use crate::error::{Error, Result};
use crate::model_io::{WeightSet, BOS_ID};
use crate::probes::{default_min_layer, flag_tokens, mean_untruthful_probability, ProbeSet};
use crate::scalar::Scalar;
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMaskConfig {
    /// First probe layer of the band.
    pub min_layer: usize,
    /// Cap on removed tokens as a fraction of the eligible tokens.
    pub budget: f64,
    pub keep_bos: bool,
    pub rule: ApportionRule,
}

impl SubspaceMaskConfig {
    /// Default probe band for an `num_layers`-layer model, no budget cap.
    pub fn for_layers(num_layers: usize) -> Self {
        Self {
            min_layer: default_min_layer(num_layers),
            budget: 1.0,
            keep_bos: true,
            rule: ApportionRule::Softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMaskResult {
    pub flagged: Vec<usize>,
    /// Mean untruthful probability per position.
    pub flag_scores: Vec<f64>,
    /// Flag-based baseline: the flagged tokens themselves.
    pub flag_removed: Vec<usize>,
    pub flag_masked_tokens: Vec<usize>,
    /// Averaged contribution of each input token to the untruthful direction.
    pub contributions: Vec<f64>,
    pub removed: Vec<usize>,
    pub masked_tokens: Vec<usize>,
}

fn eligible(tokens: &[usize], i: usize, keep_bos: bool) -> bool {
    !(keep_bos && i == 0 && tokens[0] == BOS_ID)
}

/// Top `count` eligible positions by `scores`; ties go to the lower position.
fn top_positions(tokens: &[usize], scores: &[f64], count: usize, keep_bos: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..tokens.len()).filter(|&i| eligible(tokens, i, keep_bos)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn remove(tokens: &[usize], positions: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| positions.binary_search(i).is_err())
        .map(|(_, &t)| t)
        .collect()
}

pub fn depass_subspace_masking<T: Scalar>(
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    probes: &ProbeSet<T>,
    cfg: &SubspaceMaskConfig,
) -> Result<SubspaceMaskResult> {
    if !(cfg.budget > 0.0 && cfg.budget <= 1.0) {
        return Err(Error::Usage(format!("budget {} outside (0, 1]", cfg.budget)));
    }
    let tokens = &trace.tokens;
    let n = tokens.len();
    let flag_scores = mean_untruthful_probability(trace, probes, cfg.min_layer)?;
    let flags = flag_tokens(&flag_scores);
    let flagged: Vec<usize> = (0..n).filter(|&i| flags[i]).collect();

    let n_eff = (0..n).filter(|&i| eligible(tokens, i, cfg.keep_bos)).count();
    let n_flag_eligible = flagged.iter().filter(|&&i| eligible(tokens, i, cfg.keep_bos)).count();
    let count = n_flag_eligible.min(intervention_count(cfg.budget, n_eff));

    if count == 0 || flagged.is_empty() {
        return Ok(SubspaceMaskResult {
            flagged,
            flag_scores,
            flag_removed: Vec::new(),
            flag_masked_tokens: tokens.clone(),
            contributions: vec![0.0; n],
            removed: Vec::new(),
            masked_tokens: tokens.clone(),
        });
    }
    // baseline removes the most confidently flagged tokens
    let flag_rank: Vec<f64> = flags
        .iter()
        .zip(&flag_scores)
        .map(|(&f, &s)| if f { s } else { f64::NEG_INFINITY })
        .collect();
    let flag_removed = top_positions(tokens, &flag_rank, count, cfg.keep_bos);

    let band: Vec<usize> = probes
        .band(cfg.min_layer)
        .map(|(l, _)| l)
        .filter(|&l| l < weights.config().num_layers)
        .collect();
    let opts = RunOptions {
        snapshot_layers: band.iter().copied().collect(),
        ..RunOptions::with_rule(cfg.rule)
    };
    let run = run_decomposed(trace, weights, &InitSpec::token_wise(n), &opts)?;

    let mut contributions = vec![0.0; n];
    for &l in &band {
        let probe = &probes.probes[&l];
        let v = probe.class_direction(probes.untruthful_class);
        let scores = direction_attribution(&run.snapshots[&l], &v, &flagged)?;
        for row in scores {
            contributions.iter_mut().zip(row).for_each(|(c, s)| *c += s);
        }
    }
    let denom = (band.len() * flagged.len()) as f64;
    contributions.iter_mut().for_each(|c| *c /= denom);

    let removed = top_positions(tokens, &contributions, count, cfg.keep_bos);
    Ok(SubspaceMaskResult {
        flag_masked_tokens: remove(tokens, &flag_removed),
        masked_tokens: remove(tokens, &removed),
        flagged,
        flag_scores,
        flag_removed,
        contributions,
        removed,
    })
}
