//! Scores from decomposed states: logit and direction attribution,
//! component-importance variants, and report export.

use serde::{Deserialize, Serialize};

use crate::decomposed::{DecomposedRun, DecomposedState, InitSpec, Stage};
use crate::error::{Error, Result};
use crate::model_io::WeightSet;
use crate::scalar::{dot, l2_norm, Scalar};
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Logit { token: usize },
    Direction { layer: usize, vector: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    /// Signed contribution to the target.
    Depass,
    DepassAbs,
    /// ℓ2 norm of the component at its initialization point.
    Norm,
    /// Summed absolute neuron activations (neuron decompositions only).
    Coef,
}

impl ImportanceMethod {
    pub fn name(self) -> &'static str {
        match self {
            ImportanceMethod::Depass => "depass",
            ImportanceMethod::DepassAbs => "depass_abs",
            ImportanceMethod::Norm => "norm",
            ImportanceMethod::Coef => "coef",
        }
    }
}

impl std::str::FromStr for ImportanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depass" => Ok(Self::Depass),
            "depass_abs" | "depass-abs" => Ok(Self::DepassAbs),
            "norm" => Ok(Self::Norm),
            "coef" => Ok(Self::Coef),
            _ => Err(Error::Usage(format!("unknown scoring method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub target: Target,
    pub method: String,
    pub model_fingerprint: String,
    pub component_labels: Vec<String>,
    pub token_ids: Vec<usize>,
    /// Query positions the scores refer to.
    pub positions: Vec<usize>,
    /// `scores[p][m]` for `positions[p]`.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScoresWire {
    Single(Vec<f64>),
    PerPosition(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct ReportWire {
    target: Target,
    method: String,
    model_fingerprint: String,
    labels: Vec<String>,
    token_ids: Vec<usize>,
    positions: Vec<usize>,
    scores: ScoresWire,
    normalized: ScoresWire,
}

/// Output encodings for [`export_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Usage(format!("unknown report format {s:?}"))),
        }
    }
}

/// Scores divided by the sum of their absolute values (zeros stay zero).
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| s / total).collect()
}

impl AttributionReport {
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.scores.iter().map(|s| normalize_scores(s)).collect()
    }

    /// Scores at the single (or last requested) position.
    pub fn last_scores(&self) -> &[f64] {
        self.scores.last().map_or(&[], Vec::as_slice)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let wrap = |s: Vec<Vec<f64>>| {
            if s.len() == 1 {
                ScoresWire::Single(s.into_iter().next().unwrap())
            } else {
                ScoresWire::PerPosition(s)
            }
        };
        let wire = ReportWire {
            target: self.target.clone(),
            method: self.method.clone(),
            model_fingerprint: self.model_fingerprint.clone(),
            labels: self.component_labels.clone(),
            token_ids: self.token_ids.clone(),
            positions: self.positions.clone(),
            scores: wrap(self.scores.clone()),
            normalized: wrap(self.normalized()),
        };
        Ok(serde_json::to_vec_pretty(&wire)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let wire: ReportWire = serde_json::from_slice(bytes)?;
        let scores = match wire.scores {
            ScoresWire::Single(s) => vec![s],
            ScoresWire::PerPosition(s) => s,
        };
        Ok(Self {
            target: wire.target,
            method: wire.method,
            model_fingerprint: wire.model_fingerprint,
            component_labels: wire.labels,
            token_ids: wire.token_ids,
            positions: wire.positions,
            scores,
        })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["position", "component", "label", "score", "normalized"])?;
        for (p, (scores, norm)) in self.scores.iter().zip(self.normalized()).enumerate() {
            for (m, (s, ns)) in scores.iter().zip(norm).enumerate() {
                w.write_record([
                    self.positions[p].to_string(),
                    m.to_string(),
                    self.component_labels[m].clone(),
                    format!("{s:e}"),
                    format!("{ns:e}"),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn export_report(report: &AttributionReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    }
}

const SHADES: [&str; 5] = ["    ", "░░░░", "▒▒▒▒", "▓▓▓▓", "████"];

/// Rank-quantile bucket (0..=4) of each score; equal scores share a level.
pub fn shade_levels(scores: &[f64]) -> Vec<usize> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut levels = vec![0; n];
    let mut rank = 0;
    for (pos, &idx) in order.iter().enumerate() {
        if pos > 0 && scores[idx] != scores[order[pos - 1]] {
            rank = pos;
        }
        levels[idx] = if n > 1 { rank * (SHADES.len() - 1) / (n - 1) } else { 0 };
    }
    levels
}

/// Plain-text table: one row per component, one column per query position,
/// each cell showing the score and a five-level shade.
pub fn render_heatmap_text(report: &AttributionReport) -> String {
    let label_w = report
        .component_labels
        .iter()
        .map(|l| l.chars().count())
        .max()
        .unwrap_or(0)
        .max(9);
    let levels: Vec<Vec<usize>> = report.scores.iter().map(|s| shade_levels(s)).collect();
    let mut out = format!("{:<label_w$}", "component");
    for p in &report.positions {
        out.push_str(&format!(" | {:>17}", format!("pos {p}")));
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + report.positions.len() * 20));
    out.push('\n');
    for (m, label) in report.component_labels.iter().enumerate() {
        out.push_str(&format!("{label:<label_w$}"));
        for (p, scores) in report.scores.iter().enumerate() {
            out.push_str(&format!(" | {:>12.5} {}", scores[m], SHADES[levels[p][m]]));
        }
        out.push('\n');
    }
    out
}

/// `w · dec[i, m, :]` for each requested position. `dec` must sit after the
/// final norm.
pub fn logit_attribution<T: Scalar>(dec: &DecomposedState<T>, w_y: &[T], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
    if dec.point().stage != Stage::PostFinalNorm {
        return Err(Error::Usage(format!(
            "logit attribution needs the post-final-norm decomposition, got {}",
            dec.point()
        )));
    }
    project(dec, w_y, positions)
}

/// `v · dec[i, m, :]` at every requested position.
pub fn direction_attribution<T: Scalar>(
    dec: &DecomposedState<T>,
    v: &[T],
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    project(dec, v, positions)
}

fn project<T: Scalar>(dec: &DecomposedState<T>, v: &[T], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
    if v.len() != dec.d_model() {
        return Err(Error::Input(format!(
            "direction has {} entries, hidden size is {}",
            v.len(),
            dec.d_model()
        )));
    }
    positions
        .iter()
        .map(|&i| {
            if i >= dec.seq_len() {
                return Err(Error::Input(format!("position {i} out of range")));
            }
            Ok(dec.components().iter().map(|c| dot(c.row(i), v).as_f64()).collect())
        })
        .collect()
}

/// Which positions to score; defaults to the final query position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Positions {
    #[default]
    Last,
    All,
    Explicit(Vec<usize>),
}

impl Positions {
    pub fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            Positions::Last => vec![n - 1],
            Positions::All => (0..n).collect(),
            Positions::Explicit(p) => p.clone(),
        }
    }
}

/// Scores `run` against `target` with `method`.
pub fn component_importance<T: Scalar>(
    run: &DecomposedRun<T>,
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    spec: &InitSpec<T>,
    method: ImportanceMethod,
    target: &Target,
    positions: &Positions,
) -> Result<AttributionReport> {
    let pos = positions.resolve(trace.seq_len());
    let scores = match method {
        ImportanceMethod::Depass | ImportanceMethod::DepassAbs => {
            let raw = target_scores(run, weights, target, &pos)?;
            if method == ImportanceMethod::DepassAbs {
                raw.into_iter().map(|s| s.into_iter().map(f64::abs).collect()).collect()
            } else {
                raw
            }
        }
        ImportanceMethod::Norm => pos
            .iter()
            .map(|&i| {
                run.init
                    .components()
                    .iter()
                    .map(|c| l2_norm(c.row(i)).as_f64())
                    .collect()
            })
            .collect(),
        ImportanceMethod::Coef => {
            let InitSpec::MlpNeurons { layer, groups } = spec else {
                return Err(Error::Usage(
                    "coef scores are only defined for neuron decompositions".into(),
                ));
            };
            let act = &trace.layers[*layer].mlp_act;
            pos.iter()
                .map(|&i| {
                    let mut s: Vec<f64> = groups
                        .iter()
                        .map(|g| g.iter().map(|&k| act[(i, k)].as_f64().abs()).sum())
                        .collect();
                    // residual carries no activation
                    s.push(0.0);
                    s
                })
                .collect()
        }
    };
    Ok(AttributionReport {
        target: target.clone(),
        method: method.name().to_string(),
        model_fingerprint: weights.fingerprint().to_string(),
        component_labels: run.init.labels().to_vec(),
        token_ids: trace.tokens.clone(),
        positions: pos,
        scores,
    })
}

fn target_scores<T: Scalar>(
    run: &DecomposedRun<T>,
    weights: &WeightSet<T>,
    target: &Target,
    pos: &[usize],
) -> Result<Vec<Vec<f64>>> {
    match target {
        Target::Logit { token } => {
            let v = weights.config().vocab_size;
            if *token >= v {
                return Err(Error::Input(format!("target token {token} outside vocabulary of {v}")));
            }
            logit_attribution(&run.final_normed, weights.lm_head.row(*token), pos)
        }
        Target::Direction { layer, vector } => {
            let snap = run
                .snapshots
                .get(layer)
                .ok_or_else(|| Error::Input(format!("layer {layer} was not snapshotted")))?;
            let v: Vec<T> = vector.iter().map(|&x| T::of_f64(x)).collect();
            direction_attribution(snap, &v, pos)
        }
    }
}

/// Exact target value from the standard pass, for completeness checks.
pub fn target_value<T: Scalar>(trace: &ForwardTrace<T>, target: &Target, position: usize) -> f64 {
    match target {
        Target::Logit { token } => trace.logits[(position, *token)].as_f64(),
        Target::Direction { layer, vector } => trace
            .hidden_after(*layer)
            .row(position)
            .iter()
            .zip(vector)
            .map(|(h, v)| h.as_f64() * v)
            .sum(),
    }
}

/// Worst relative gap between summed scores and the exact target value.
pub fn completeness_error<T: Scalar>(report: &AttributionReport, trace: &ForwardTrace<T>) -> f64 {
    report
        .positions
        .iter()
        .zip(&report.scores)
        .map(|(&i, s)| {
            let exact = target_value(trace, &report.target, i);
            let sum: f64 = s.iter().sum();
            (sum - exact).abs() / exact.abs().max(1e-12)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposed::Point;
    use crate::tensor::Matrix;

    fn two_components(stage: Stage) -> DecomposedState<f64> {
        DecomposedState::new(
            vec![
                Matrix::from_rows(&[vec![0.5, 9.0]]),
                Matrix::from_rows(&[vec![0.3, -2.0]]),
            ],
            vec!["a".into(), "b".into()],
            Point::new(1, stage),
        )
        .unwrap()
    }

    #[test]
    fn logit_dot_products() {
        let dec = two_components(Stage::PostFinalNorm);
        let s = logit_attribution(&dec, &[1.0, 0.0], &[0]).unwrap();
        assert_eq!(s, vec![vec![0.5, 0.3]]);
        assert!((s[0].iter().sum::<f64>() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn logit_attribution_requires_final_point() {
        let dec = two_components(Stage::PostMlp);
        assert!(logit_attribution(&dec, &[1.0, 0.0], &[0]).is_err());
    }

    #[test]
    fn direction_examples() {
        let dec = two_components(Stage::PostMlp);
        assert_eq!(
            direction_attribution(&dec, &[0.0, 0.0], &[0]).unwrap(),
            vec![vec![0.0, 0.0]]
        );
        assert_eq!(
            direction_attribution(&dec, &[1.0, 0.0], &[0]).unwrap(),
            vec![vec![0.5, 0.3]]
        );
    }

    fn report(scores: Vec<Vec<f64>>) -> AttributionReport {
        let m = scores[0].len();
        AttributionReport {
            target: Target::Logit { token: 3 },
            method: "depass".into(),
            model_fingerprint: "abc".into(),
            component_labels: (0..m).map(|i| format!("c{i}")).collect(),
            token_ids: vec![0, 1],
            positions: (0..scores.len()).collect(),
            scores,
        }
    }

    #[test]
    fn csv_has_row_per_component() {
        let bytes = report(vec![vec![1.0, -2.0]]).to_csv().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = report(vec![
            vec![0.1 + 0.2, -1.0 / 3.0, 1e-300],
            vec![std::f64::consts::PI, 0.0, -0.0],
        ]);
        let back = AttributionReport::from_json(&r.to_json().unwrap()).unwrap();
        for (a, b) in r.scores.iter().flatten().zip(back.scores.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let single = report(vec![vec![2.5, 1.0]]);
        assert_eq!(
            AttributionReport::from_json(&single.to_json().unwrap()).unwrap(),
            single
        );
    }

    #[test]
    fn shading_is_monotone() {
        assert_eq!(shade_levels(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![0, 1, 2, 3, 4]);
        assert_eq!(shade_levels(&[5.0, 1.0, 3.0]), vec![4, 0, 2]);
        let lv = shade_levels(&[2.0, 2.0, 1.0]);
        assert_eq!(lv[0], lv[1]);
        let text = render_heatmap_text(&report(vec![vec![1.0, 2.0]]));
        assert!(text.contains("c1") && text.contains("████"));
    }

    #[test]
    fn normalized_scores() {
        assert_eq!(normalize_scores(&[-2.0, 3.0]), vec![-0.4, 0.6]);
        assert_eq!(normalize_scores(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
