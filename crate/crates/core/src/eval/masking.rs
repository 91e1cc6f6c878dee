//! Component masking: zero the highest- or lowest-scored heads or neuron
//! groups and check whether the greedy prediction survives.

use serde::{Deserialize, Serialize};

use super::faithfulness::correct_examples;
use crate::attribution::{component_importance, ImportanceMethod, Positions, Target};
use crate::dataset::Example;
use crate::decomposed::{run_decomposed, ApportionRule, InitSpec, RunOptions};
use crate::error::{Error, Result};
use crate::model_io::{ModelConfig, WeightSet};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::transformer::{forward, forward_with, greedy_argmax, Ablation, ForwardTrace};

/// Which units of which layer are treated as components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitKind {
    Heads { layer: usize },
    Neurons { layer: usize, groups: Vec<Vec<usize>> },
}

impl UnitKind {
    pub fn neuron_bins(layer: usize, d_mlp: usize, bin: usize) -> Self {
        match InitSpec::<f64>::neuron_bins(layer, d_mlp, bin) {
            InitSpec::MlpNeurons { layer, groups } => UnitKind::Neurons { layer, groups },
            _ => unreachable!(),
        }
    }

    pub fn init_spec<T: Scalar>(&self) -> InitSpec<T> {
        match self {
            UnitKind::Heads { layer } => InitSpec::AttentionHeads { layer: *layer },
            UnitKind::Neurons { layer, groups } => InitSpec::MlpNeurons {
                layer: *layer,
                groups: groups.clone(),
            },
        }
    }

    /// Number of ablatable components (the residual is excluded).
    pub fn count(&self, config: &ModelConfig) -> usize {
        match self {
            UnitKind::Heads { .. } => config.num_heads,
            UnitKind::Neurons { groups, .. } => groups.len(),
        }
    }
}

/// Ablation zeroing the given component indices of `kind`.
pub fn component_ablation(config: &ModelConfig, kind: &UnitKind, set: &[usize]) -> Result<Ablation> {
    let n = kind.count(config);
    let mut ablation = Ablation::none();
    for &m in set {
        if m == n {
            return Err(Error::Usage("the residual component cannot be masked".into()));
        }
        if m > n {
            return Err(Error::Usage(format!("component {m} out of range ({n} ablatable)")));
        }
        match kind {
            UnitKind::Heads { layer } => {
                ablation.heads.insert((*layer, m));
            }
            UnitKind::Neurons { layer, groups } => ablation.neurons.extend(groups[m].iter().map(|&k| (*layer, k))),
        }
    }
    Ok(ablation)
}

/// Every head of every layer.
pub fn all_heads(config: &ModelConfig) -> Ablation {
    let mut a = Ablation::none();
    for l in 0..config.num_layers {
        a.heads.extend((0..config.num_heads).map(|h| (l, h)));
    }
    a
}

/// Forward runner with a fixed set of units zeroed.
pub struct MaskedRunner<'a, T> {
    weights: &'a WeightSet<T>,
    ablation: Ablation,
}

impl<'a, T: Scalar> MaskedRunner<'a, T> {
    pub fn new(weights: &'a WeightSet<T>, ablation: Ablation) -> Self {
        Self { weights, ablation }
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    pub fn run(&self, tokens: &[usize]) -> Result<ForwardTrace<T>> {
        forward_with(tokens, self.weights, &self.ablation)
    }
}

pub fn mask_components<'a, T: Scalar>(
    weights: &'a WeightSet<T>,
    kind: &UnitKind,
    set: &[usize],
) -> Result<MaskedRunner<'a, T>> {
    Ok(MaskedRunner::new(
        weights,
        component_ablation(weights.config(), kind, set)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrder {
    TopK,
    BottomK,
}

impl MaskOrder {
    pub fn name(self) -> &'static str {
        match self {
            MaskOrder::TopK => "top_k",
            MaskOrder::BottomK => "bottom_k",
        }
    }
}

/// How components are ranked before masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentScoreMethod {
    Importance {
        method: ImportanceMethod,
        rule: ApportionRule,
    },
    /// Uniform random scores; a control for the ranking.
    Random { seed: u64 },
}

impl ComponentScoreMethod {
    pub fn name(&self) -> String {
        match self {
            ComponentScoreMethod::Importance { method, rule } => match rule {
                ApportionRule::Softmax => method.name().to_string(),
                r => format!("{}_{}", method.name(), r.name().replace('-', "_")),
            },
            ComponentScoreMethod::Random { seed } => format!("random{seed}"),
        }
    }
}

impl std::str::FromStr for ComponentScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("random") {
            let seed = if seed.is_empty() {
                0
            } else {
                seed.parse()
                    .map_err(|_| Error::Usage(format!("bad random seed in {s:?}")))?
            };
            return Ok(Self::Random { seed });
        }
        for rule in ApportionRule::ALL {
            let suffix = format!("_{}", rule.name().replace('-', "_"));
            if let Some(base) = s.strip_suffix(&suffix) {
                return Ok(Self::Importance {
                    method: base.parse()?,
                    rule,
                });
            }
        }
        Ok(Self::Importance {
            method: s.parse()?,
            rule: ApportionRule::Softmax,
        })
    }
}

/// Scores of the ablatable components for predicting `target` at the last
/// position.
pub fn component_scores<T: Scalar>(
    method: ComponentScoreMethod,
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    kind: &UnitKind,
    target: usize,
    example_index: usize,
) -> Result<Vec<f64>> {
    let n = kind.count(weights.config());
    match method {
        ComponentScoreMethod::Random { seed } => {
            let mut rng = SplitMix64::new(seed ^ (example_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            Ok((0..n).map(|_| rng.next_f64()).collect())
        }
        ComponentScoreMethod::Importance { method, rule } => {
            let spec = kind.init_spec();
            let run = run_decomposed(trace, weights, &spec, &RunOptions::with_rule(rule))?;
            let report = component_importance(
                &run,
                trace,
                weights,
                &spec,
                method,
                &Target::Logit { token: target },
                &Positions::Last,
            )?;
            Ok(report.last_scores()[..n].to_vec())
        }
    }
}

/// The `k` highest (or lowest) scored indices; ties go to the lower index.
pub fn select_components(scores: &[f64], order: MaskOrder, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let c = match order {
            MaskOrder::TopK => scores[b].total_cmp(&scores[a]),
            MaskOrder::BottomK => scores[a].total_cmp(&scores[b]),
        };
        c.then(a.cmp(&b))
    });
    idx.truncate(k.min(scores.len()));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingCurve {
    pub method: String,
    pub order: MaskOrder,
    pub grid: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub examples: Vec<usize>,
    /// `correct[g][e]`: prediction survived at `grid[g]` for `examples[e]`.
    pub correct: Vec<Vec<bool>>,
}

pub fn run_component_masking<T: Scalar>(
    weights: &WeightSet<T>,
    dataset: &[Example],
    kind: &UnitKind,
    method: ComponentScoreMethod,
    order: MaskOrder,
    grid: &[usize],
) -> Result<MaskingCurve> {
    let examples = correct_examples(weights, dataset)?;
    if examples.is_empty() {
        return Err(Error::Evaluation("no correctly predicted examples to mask".into()));
    }
    let n = kind.count(weights.config());
    let grid: Vec<usize> = grid
        .iter()
        .map(|&k| {
            if k > n {
                log::warn!("k = {k} exceeds the {n} ablatable components; clamping");
            }
            k.min(n)
        })
        .collect();

    let mut correct = vec![Vec::with_capacity(examples.len()); grid.len()];
    for &e in &examples {
        let ex = &dataset[e];
        let trace = forward(&ex.tokens, weights)?;
        let scores = component_scores(method, &trace, weights, kind, ex.target, e)?;
        for (g, &k) in grid.iter().enumerate() {
            let runner = mask_components(weights, kind, &select_components(&scores, order, k))?;
            let masked = runner.run(&ex.tokens)?;
            correct[g].push(greedy_argmax(masked.last_logits())? == ex.target);
        }
    }
    let accuracy = correct
        .iter()
        .map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
        .collect();
    Ok(MaskingCurve {
        method: method.name(),
        order,
        grid,
        accuracy,
        examples,
        correct,
    })
}

/// CSV with columns `method, K_or_k, mean_metric, n_examples`.
pub fn masking_csv(curves: &[MaskingCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "K_or_k", "mean_metric", "n_examples"])?;
    for c in curves {
        for (k, a) in c.grid.iter().zip(&c.accuracy) {
            w.write_record([
                format!("{}/{}", c.method, c.order.name()),
                k.to_string(),
                a.to_string(),
                c.examples.len().to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
