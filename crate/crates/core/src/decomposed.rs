//! Decomposed forward pass.
//!
//! A hidden state is split into `M` additive components at some point of the
//! network. Components are then pushed through the remaining blocks with the
//! RMS scales, attention probabilities and MLP activations of a prior
//! standard pass held fixed:
//!
//! * RMSNorm: every component is scaled by the same per-position factor
//!   `gain / RMS(full state)`.
//! * Attention: every component goes through the frozen `A · X̃ · W_VO` map
//!   and keeps its own residual.
//! * MLP: neuron `k`'s output `m_k v_k` is shared out between components by
//!   weights `α` computed from the per-component pre-activations
//!   `a_{m,k} = subkey_k · x̃_m` (see [`ApportionRule`]).
//!
//! The component sum is checked against the trace after every stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model_io::{ArchiveWriter, LayerWeights, MlpWeights, ModelConfig, WeightSet};
use crate::probes::ProjectionMatrix;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::transformer::{rms_scale, ForwardTrace, LayerTrace};

/// Denominator below which `linear_weighted` falls back to uniform shares.
pub const LINEAR_WEIGHTED_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreAttention,
    PostAttention,
    PostMlp,
    PostFinalNorm,
}

/// Location of a decomposed state: a layer and a position inside it.
/// `PostFinalNorm` uses `layer = num_layers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub layer: usize,
    pub stage: Stage,
}

impl Point {
    pub fn new(layer: usize, stage: Stage) -> Self {
        Self { layer, stage }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Stage::PreAttention => write!(f, "layer {} pre-attention", self.layer),
            Stage::PostAttention => write!(f, "layer {} post-attention", self.layer),
            Stage::PostMlp => write!(f, "layer {} post-mlp", self.layer),
            Stage::PostFinalNorm => write!(f, "post-final-norm"),
        }
    }
}

/// Traced full hidden state at `point`.
pub fn reference_state<T: Scalar>(trace: &ForwardTrace<T>, point: Point) -> &Matrix<T> {
    match point.stage {
        Stage::PreAttention => &trace.layers[point.layer].hidden_in,
        Stage::PostAttention => &trace.layers[point.layer].attn_state,
        Stage::PostMlp => &trace.layers[point.layer].hidden_out,
        Stage::PostFinalNorm => &trace.final_normed,
    }
}

/// `N × M × D` additive decomposition of a hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedState<T> {
    components: Vec<Matrix<T>>,
    labels: Vec<String>,
    start: Point,
    point: Point,
}

impl<T: Scalar> DecomposedState<T> {
    /// All components must share one `N × D` shape.
    pub fn new(components: Vec<Matrix<T>>, labels: Vec<String>, point: Point) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Input("a decomposition needs at least one component".into()));
        }
        if labels.len() != components.len() {
            return Err(Error::Input("one label per component required".into()));
        }
        let shape = components[0].shape();
        if components.iter().any(|c| c.shape() != shape) {
            return Err(Error::Input("components differ in shape".into()));
        }
        Ok(Self {
            components,
            labels,
            start: point,
            point,
        })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn seq_len(&self) -> usize {
        self.components[0].rows()
    }

    pub fn d_model(&self) -> usize {
        self.components[0].cols()
    }

    pub fn component(&self, m: usize) -> &Matrix<T> {
        &self.components[m]
    }

    pub fn components(&self) -> &[Matrix<T>] {
        &self.components
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn start(&self) -> Point {
        self.start
    }

    pub fn point(&self) -> Point {
        self.point
    }

    /// `data[i, m, d]`
    pub fn get(&self, i: usize, m: usize, d: usize) -> T {
        self.components[m][(i, d)]
    }

    /// Elementwise sum over components.
    pub fn reconstruct(&self) -> Matrix<T> {
        reconstruct(&self.components)
    }

    /// Max over positions of `‖Σ_m dec[i,m] − X_i‖ / (‖X_i‖ + ε)`.
    pub fn reconstruction_error(&self, reference: &Matrix<T>) -> f64 {
        relative_error(&self.reconstruct(), reference)
    }

    pub fn to_archive(&self) -> ArchiveWriter {
        let (n, m, d) = (self.seq_len(), self.num_components(), self.d_model());
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for c in &self.components {
                data.extend_from_slice(c.row(i));
            }
        }
        let mut w = ArchiveWriter::new();
        w.metadata("kind", "decomposed_state".into());
        w.metadata("component_labels", json!(self.labels));
        w.metadata("start", json!(self.start));
        w.metadata("point", json!(self.point));
        w.add("components", &[n, m, d], &data);
        w
    }
}

pub fn reconstruct<T: Scalar>(components: &[Matrix<T>]) -> Matrix<T> {
    let mut sum = components[0].clone();
    for c in &components[1..] {
        sum.add_assign(c);
    }
    sum
}

pub fn relative_error<T: Scalar>(approx: &Matrix<T>, reference: &Matrix<T>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..reference.rows() {
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (a, r) in approx.row(i).iter().zip(reference.row(i)) {
            let (a, r) = (a.as_f64(), r.as_f64());
            diff += (a - r) * (a - r);
            norm += r * r;
        }
        worst = worst.max(diff.sqrt() / (norm.sqrt() + f64::MIN_POSITIVE));
    }
    worst
}

/// Relative reconstruction error of `dec` against the trace at its point.
pub fn check_reconstruction<T: Scalar>(dec: &DecomposedState<T>, trace: &ForwardTrace<T>) -> f64 {
    dec.reconstruction_error(reference_state(trace, dec.point))
}

/// How a neuron's output is shared between components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApportionRule {
    /// `α = softmax_m(a)`
    #[default]
    Softmax,
    /// `α = (a − min_m a) / Σ_m (a − min_m a)`
    LinearNorm,
    /// `α = a / Σ_m a`
    LinearWeighted,
}

impl ApportionRule {
    pub const ALL: [ApportionRule; 3] = [
        ApportionRule::Softmax,
        ApportionRule::LinearNorm,
        ApportionRule::LinearWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ApportionRule::Softmax => "softmax",
            ApportionRule::LinearNorm => "linear-norm",
            ApportionRule::LinearWeighted => "linear-weighted",
        }
    }
}

impl std::str::FromStr for ApportionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear-norm" | "linear_norm" => Ok(Self::LinearNorm),
            "linear-weighted" | "linear_weighted" => Ok(Self::LinearWeighted),
            _ => Err(Error::Usage(format!("unknown apportion rule {s:?}"))),
        }
    }
}

/// Which weight row serves as neuron `k`'s subkey in a gated MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubkeySource {
    #[default]
    Gate,
    Up,
    GateUpSum,
}

/// Per-column normalizers of the pre-activations over components.
#[derive(Debug, Clone, Copy)]
enum ColumnStats<T> {
    Softmax { max: T, total: T },
    Shifted { min: T, total: T },
    Weighted { total: T },
    Uniform,
}

fn column_stats<T: Scalar>(a: impl Iterator<Item = T> + Clone, rule: ApportionRule) -> ColumnStats<T> {
    match rule {
        ApportionRule::Softmax => {
            let max = a.clone().fold(T::neg_infinity(), T::max);
            let total = a.fold(T::zero(), |s, v| s + (v - max).exp());
            ColumnStats::Softmax { max, total }
        }
        ApportionRule::LinearNorm => {
            let min = a.clone().fold(T::infinity(), T::min);
            let total = a.fold(T::zero(), |s, v| s + (v - min));
            if total > T::zero() {
                ColumnStats::Shifted { min, total }
            } else {
                ColumnStats::Uniform
            }
        }
        ApportionRule::LinearWeighted => {
            let total = a.fold(T::zero(), |s, v| s + v);
            if total.abs().as_f64() < LINEAR_WEIGHTED_EPS {
                ColumnStats::Uniform
            } else {
                ColumnStats::Weighted { total }
            }
        }
    }
}

impl<T: Scalar> ColumnStats<T> {
    #[inline]
    fn share(&self, a: T, m_count: usize) -> T {
        match *self {
            ColumnStats::Softmax { max, total } => (a - max).exp() / total,
            ColumnStats::Shifted { min, total } => (a - min) / total,
            ColumnStats::Weighted { total } => a / total,
            ColumnStats::Uniform => T::one() / T::of_usize(m_count),
        }
    }

    fn is_fallback(&self) -> bool {
        matches!(self, ColumnStats::Uniform)
    }
}

/// Shares of one neuron at one position across components. The flag is set
/// when a degenerate denominator forced the uniform fallback.
pub fn apportion_column<T: Scalar>(a: &[T], rule: ApportionRule) -> (Vec<T>, bool) {
    let stats = column_stats(a.iter().copied(), rule);
    (
        a.iter().map(|&v| stats.share(v, a.len())).collect(),
        stats.is_fallback(),
    )
}

/// `α[m][i, k]` for per-component pre-activations `a[m]` (each N × d_mlp).
/// Returns the shares and the number of `(i, k)` columns that fell back to
/// uniform.
pub fn apportion<T: Scalar>(a: &[Matrix<T>], rule: ApportionRule) -> (Vec<Matrix<T>>, usize) {
    let (n, k) = a[0].shape();
    let stats = all_column_stats(a, rule);
    let fallbacks = stats.iter().filter(|s| s.is_fallback()).count();
    let alpha = a
        .iter()
        .map(|am| {
            let mut out = Matrix::zeros(n, k);
            for (idx, (o, &v)) in out.as_mut_slice().iter_mut().zip(am.as_slice()).enumerate() {
                *o = stats[idx].share(v, a.len());
            }
            out
        })
        .collect();
    (alpha, fallbacks)
}

fn all_column_stats<T: Scalar>(a: &[Matrix<T>], rule: ApportionRule) -> Vec<ColumnStats<T>> {
    let len = a[0].as_slice().len();
    (0..len)
        .map(|idx| column_stats(a.iter().map(move |am| am.as_slice()[idx]), rule))
        .collect()
}

/// Subkey matrix (d_mlp × D) used for the pre-activations `a`.
pub fn subkeys<T: Scalar>(mlp: &MlpWeights<T>, source: SubkeySource) -> Matrix<T> {
    match mlp {
        MlpWeights::Plain { w_up, .. } => w_up.clone(),
        MlpWeights::Gated { w_gate, w_up, .. } => match source {
            SubkeySource::Gate => w_gate.clone(),
            SubkeySource::Up => w_up.clone(),
            SubkeySource::GateUpSum => w_gate.add(w_up),
        },
    }
}

/// `a[m] = x̃_m · subkeysᵀ` followed by [`apportion`].
pub fn apportion_mlp<T: Scalar>(
    normed: &[Matrix<T>],
    subkeys: &Matrix<T>,
    rule: ApportionRule,
) -> (Vec<Matrix<T>>, usize) {
    let a: Vec<_> = normed.iter().map(|x| x.matmul_t(subkeys)).collect();
    apportion(&a, rule)
}

/// Scales one component by frozen per-position factors and the gain.
pub fn normalize_component<T: Scalar>(component: &Matrix<T>, scales: &[T], gain: &[T]) -> Matrix<T> {
    let mut out = component.clone();
    for (i, &s) in scales.iter().enumerate() {
        for (v, &g) in out.row_mut(i).iter_mut().zip(gain) {
            *v = g * (*v * s);
        }
    }
    out
}

/// Distributes RMSNorm over components using the RMS of `full_state`.
pub fn propagate_rmsnorm<T: Scalar>(
    components: &[Matrix<T>],
    full_state: &Matrix<T>,
    gain: &[T],
    eps: f64,
) -> Result<Vec<Matrix<T>>> {
    let err = relative_error(&reconstruct(components), full_state);
    if err > T::RECON_TOL {
        return Err(Error::Consistency(format!(
            "components do not sum to the full state (relative error {err:.3e})"
        )));
    }
    let scales = (0..full_state.rows())
        .map(|i| rms_scale(full_state.row(i), eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(components
        .iter()
        .map(|c| normalize_component(c, &scales, gain))
        .collect())
}

/// Frozen attention applied to one normalized component:
/// `Σ_h A_h · x̃ · W_V^{g(h)} · W_O^{h}`.
pub fn attention_on_component<T: Scalar>(
    normed: &Matrix<T>,
    attn_probs: &[Matrix<T>],
    layer: &LayerWeights<T>,
    config: &ModelConfig,
) -> Matrix<T> {
    let (n, d, dh) = (normed.rows(), config.d_model, config.head_dim());
    let v = normed.matmul(&layer.wv);
    let mut z = Matrix::zeros(n, d);
    for (h, a) in attn_probs.iter().enumerate() {
        let g = config.kv_head_for(h);
        for i in 0..n {
            for j in 0..=i {
                let p = a[(i, j)];
                if p == T::zero() {
                    continue;
                }
                let vj = &v.row(j)[g * dh..(g + 1) * dh];
                let zi = &mut z.row_mut(i)[h * dh..(h + 1) * dh];
                for (o, &vv) in zi.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    z.matmul(&layer.wo)
}

/// Residual plus frozen attention for every component. `normed` are the
/// components after [`propagate_rmsnorm`].
pub fn propagate_attention<T: Scalar>(
    residual: &[Matrix<T>],
    normed: &[Matrix<T>],
    attn_probs: &[Matrix<T>],
    layer: &LayerWeights<T>,
    config: &ModelConfig,
) -> Result<Vec<Matrix<T>>> {
    check_probs(attn_probs, residual, config)?;
    Ok(residual
        .iter()
        .zip(normed)
        .map(|(r, x)| r.add(&attention_on_component(x, attn_probs, layer, config)))
        .collect())
}

fn check_probs<T: Scalar>(attn_probs: &[Matrix<T>], comps: &[Matrix<T>], config: &ModelConfig) -> Result<()> {
    let n = comps[0].rows();
    if attn_probs.len() != config.num_heads || attn_probs.iter().any(|a| a.shape() != (n, n)) {
        return Err(Error::Consistency(format!(
            "attention probabilities do not match {} heads over {} positions",
            config.num_heads, n
        )));
    }
    Ok(())
}

/// Adds each component's share of the frozen MLP output:
/// `comp_m += Σ_k α[m][i,k] · act[i,k] · v_k`.
pub fn propagate_mlp<T: Scalar>(
    components: &mut [Matrix<T>],
    alpha: &[Matrix<T>],
    activations: &Matrix<T>,
    w_down: &Matrix<T>,
) {
    for (comp, al) in components.iter_mut().zip(alpha) {
        add_mlp_share(comp, al, activations, w_down);
    }
}

fn add_mlp_share<T: Scalar>(comp: &mut Matrix<T>, alpha: &Matrix<T>, activations: &Matrix<T>, w_down: &Matrix<T>) {
    let mut weighted = alpha.clone();
    for (w, &m) in weighted.as_mut_slice().iter_mut().zip(activations.as_slice()) {
        *w *= m;
    }
    comp.add_assign(&weighted.matmul_t(w_down));
}

/// How to split the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec<T> {
    /// Group `g` owns the embeddings of its positions; starts before layer 0.
    TokenWise { groups: Vec<Vec<usize>> },
    /// One component per head output of `layer` plus the residual input;
    /// starts after that layer's attention.
    AttentionHeads { layer: usize },
    /// One component per neuron group of `layer` plus the post-attention
    /// residual; starts after that layer's MLP.
    MlpNeurons { layer: usize, groups: Vec<Vec<usize>> },
    /// `[P x, (I − P) x]` of the residual entering `layer`.
    Subspace {
        layer: usize,
        projector: ProjectionMatrix<T>,
    },
}

impl<T: Scalar> InitSpec<T> {
    /// One component per position.
    pub fn token_wise(n: usize) -> Self {
        InitSpec::TokenWise {
            groups: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// Neurons of `layer` in contiguous bins of `bin` (last bin may be short).
    pub fn neuron_bins(layer: usize, d_mlp: usize, bin: usize) -> Self {
        let bin = bin.max(1);
        InitSpec::MlpNeurons {
            layer,
            groups: (0..d_mlp)
                .step_by(bin)
                .map(|s| (s..(s + bin).min(d_mlp)).collect())
                .collect(),
        }
    }

    pub fn start_point(&self) -> Point {
        match self {
            InitSpec::TokenWise { .. } => Point::new(0, Stage::PreAttention),
            InitSpec::AttentionHeads { layer } => Point::new(*layer, Stage::PostAttention),
            InitSpec::MlpNeurons { layer, .. } => Point::new(*layer, Stage::PostMlp),
            InitSpec::Subspace { layer, .. } => Point::new(*layer, Stage::PreAttention),
        }
    }

    /// Whether the last component is the (non-ablatable) residual.
    pub fn has_residual(&self) -> bool {
        matches!(self, InitSpec::AttentionHeads { .. } | InitSpec::MlpNeurons { .. })
    }
}

fn check_partition(groups: &[Vec<usize>], size: usize, what: &str) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Input(format!("{what} partition has no groups")));
    }
    let mut seen = vec![false; size];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Input(format!("{what} group {g} is empty")));
        }
        for &p in members {
            if p >= size {
                return Err(Error::Input(format!("{what} index {p} out of range (size {size})")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Input(format!("{what} index {p} appears in more than one group")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Input(format!(
            "{what} index {missing} is not covered by any group"
        )));
    }
    Ok(())
}

fn group_label(prefix: &str, members: &[usize]) -> String {
    let contiguous = members.windows(2).all(|w| w[1] == w[0] + 1);
    match members {
        [one] => format!("{prefix}{one}"),
        [first, .., last] if contiguous => format!("{prefix}{first}-{last}"),
        _ => format!(
            "{prefix}{}",
            members.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
        ),
    }
}

/// Normalized input of a layer's attention rebuilt from trace scales.
fn normed_attn_input<T: Scalar>(lt: &LayerTrace<T>, lw: &LayerWeights<T>) -> Matrix<T> {
    normalize_component(&lt.hidden_in, &lt.attn_scale, &lw.attn_norm)
}

/// Output of every head of one layer, recomputed from the trace.
pub fn head_outputs<T: Scalar>(lt: &LayerTrace<T>, lw: &LayerWeights<T>, config: &ModelConfig) -> Vec<Matrix<T>> {
    let xn = normed_attn_input(lt, lw);
    (0..config.num_heads)
        .map(|h| {
            let vo = lw.head_vo(config, h);
            lt.attn_probs[h].matmul(&xn.matmul(&vo))
        })
        .collect()
}

fn check_trace<T: Scalar>(trace: &ForwardTrace<T>, weights: &WeightSet<T>) -> Result<()> {
    if trace.model_fingerprint != weights.fingerprint() {
        return Err(Error::Consistency(format!(
            "trace was produced by model {} but weights are {}",
            trace.model_fingerprint,
            weights.fingerprint()
        )));
    }
    Ok(())
}

/// Builds the initial decomposition described by `spec` from a trace.
pub fn init_decomposition<T: Scalar>(
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    spec: &InitSpec<T>,
) -> Result<DecomposedState<T>> {
    check_trace(trace, weights)?;
    let c = weights.config();
    let n = trace.seq_len();
    let layer_ok = |l: usize| -> Result<()> {
        if l >= c.num_layers {
            return Err(Error::Input(format!(
                "layer {l} out of range for a {}-layer model",
                c.num_layers
            )));
        }
        Ok(())
    };
    let point = spec.start_point();
    let (components, labels) = match spec {
        InitSpec::TokenWise { groups } => {
            check_partition(groups, n, "position")?;
            let comps = groups
                .iter()
                .map(|g| {
                    let mut m = Matrix::zeros(n, c.d_model);
                    for &i in g {
                        m.row_mut(i).copy_from_slice(trace.embeddings.row(i));
                    }
                    m
                })
                .collect();
            let labels = groups.iter().map(|g| group_label("pos", g)).collect();
            (comps, labels)
        }
        InitSpec::AttentionHeads { layer } => {
            layer_ok(*layer)?;
            let lt = &trace.layers[*layer];
            let mut comps = head_outputs(lt, weights.layer(*layer), c);
            comps.push(lt.hidden_in.clone());
            let mut labels: Vec<_> = (0..c.num_heads).map(|h| format!("L{layer}H{h}")).collect();
            labels.push("residual".into());
            (comps, labels)
        }
        InitSpec::MlpNeurons { layer, groups } => {
            layer_ok(*layer)?;
            check_partition(groups, c.d_mlp, "neuron")?;
            let lt = &trace.layers[*layer];
            let w_down = weights.layer(*layer).mlp.w_down();
            let mut comps: Vec<_> = groups
                .iter()
                .map(|g| {
                    let mut masked = Matrix::zeros(n, c.d_mlp);
                    for i in 0..n {
                        for &k in g {
                            masked[(i, k)] = lt.mlp_act[(i, k)];
                        }
                    }
                    masked.matmul_t(w_down)
                })
                .collect();
            comps.push(lt.attn_state.clone());
            let mut labels: Vec<_> = groups.iter().map(|g| group_label(&format!("L{layer}N"), g)).collect();
            labels.push("residual".into());
            (comps, labels)
        }
        InitSpec::Subspace { layer, projector } => {
            layer_ok(*layer)?;
            if projector.dim() != c.d_model {
                return Err(Error::Input(format!(
                    "projector is {}-dimensional, model has d_model {}",
                    projector.dim(),
                    c.d_model
                )));
            }
            let x = &trace.layers[*layer].hidden_in;
            // P is symmetric, so x·P is the row form of P x.
            let par = x.matmul(projector.matrix());
            let perp = x.sub(&par);
            (vec![par, perp], vec!["in_subspace".into(), "orthogonal".into()])
        }
    };
    DecomposedState::new(components, labels, point)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub rule: ApportionRule,
    /// Components materialized per propagation batch (≥ 1).
    pub component_batch: usize,
    /// Layers whose post-MLP state is kept.
    pub snapshot_layers: BTreeSet<usize>,
    pub subkey: SubkeySource,
    /// Upper bound on `N · M · max(D, d_mlp)`.
    pub max_elements: usize,
    /// Verify Σ-reconstruction against the trace after every stage.
    pub check_reconstruction: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rule: ApportionRule::Softmax,
            component_batch: usize::MAX,
            snapshot_layers: BTreeSet::new(),
            subkey: SubkeySource::Gate,
            max_elements: 1 << 28,
            check_reconstruction: true,
        }
    }
}

impl RunOptions {
    pub fn with_rule(rule: ApportionRule) -> Self {
        Self {
            rule,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecomposedRun<T> {
    pub init: DecomposedState<T>,
    /// Decomposition of the last layer's output.
    pub final_state: DecomposedState<T>,
    /// Decomposition after the final norm (the LM head input).
    pub final_normed: DecomposedState<T>,
    pub snapshots: BTreeMap<usize, DecomposedState<T>>,
    /// Relative reconstruction error at every checked point.
    pub reconstruction: Vec<(Point, f64)>,
    /// `(i, k)` columns that used the uniform fallback, summed over layers.
    pub fallbacks: usize,
}

impl<T> DecomposedRun<T> {
    pub fn max_reconstruction_error(&self) -> f64 {
        self.reconstruction.iter().fold(0.0, |m, &(_, e)| m.max(e))
    }
}

struct Runner<'a, T: Scalar> {
    trace: &'a ForwardTrace<T>,
    weights: &'a WeightSet<T>,
    opts: &'a RunOptions,
    log: Vec<(Point, f64)>,
    fallbacks: usize,
}

impl<'a, T: Scalar> Runner<'a, T> {
    fn batches(&self, m: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let b = self.opts.component_batch.max(1);
        (0..m).step_by(b).map(move |s| s..(s + b).min(m))
    }

    fn check(&mut self, comps: &[Matrix<T>], point: Point) -> Result<()> {
        if !self.opts.check_reconstruction {
            return Ok(());
        }
        let err = relative_error(&reconstruct(comps), reference_state(self.trace, point));
        self.log.push((point, err));
        if !(err <= T::RECON_TOL) {
            return Err(Error::Consistency(format!(
                "reconstruction drift {err:.3e} at {point} exceeds {:.0e}",
                T::RECON_TOL
            )));
        }
        Ok(())
    }

    fn attention(&mut self, comps: &mut [Matrix<T>], l: usize) -> Result<()> {
        let lt = &self.trace.layers[l];
        let lw = self.weights.layer(l);
        let c = self.weights.config();
        check_probs(&lt.attn_probs, comps, c)?;
        for range in self.batches(comps.len()) {
            for comp in &mut comps[range] {
                let normed = normalize_component(comp, &lt.attn_scale, &lw.attn_norm);
                comp.add_assign(&attention_on_component(&normed, &lt.attn_probs, lw, c));
            }
        }
        self.check(comps, Point::new(l, Stage::PostAttention))
    }

    fn mlp(&mut self, comps: &mut [Matrix<T>], l: usize) -> Result<()> {
        let lt = &self.trace.layers[l];
        let lw = self.weights.layer(l);
        let keys = subkeys(&lw.mlp, self.opts.subkey);
        // phase 1: pre-activations of every component
        let mut pre = Vec::with_capacity(comps.len());
        for range in self.batches(comps.len()) {
            for comp in &comps[range] {
                let normed = normalize_component(comp, &lt.mlp_scale, &lw.mlp_norm);
                pre.push(normed.matmul_t(&keys));
            }
        }
        // phase 2: normalize across all components, then apportion per batch
        let stats = all_column_stats(&pre, self.opts.rule);
        let fallback = stats.iter().filter(|s| s.is_fallback()).count();
        if fallback > 0 {
            log::warn!(
                "layer {l}: {fallback} neuron/position pairs used uniform apportioning ({} denominator degenerate)",
                self.opts.rule.name()
            );
        }
        self.fallbacks += fallback;
        let m_count = comps.len();
        let (n, k) = pre[0].shape();
        let w_down = lw.mlp.w_down();
        for range in self.batches(m_count) {
            for m in range {
                let mut alpha = Matrix::zeros(n, k);
                for (idx, (o, &a)) in alpha.as_mut_slice().iter_mut().zip(pre[m].as_slice()).enumerate() {
                    *o = stats[idx].share(a, m_count);
                }
                add_mlp_share(&mut comps[m], &alpha, &lt.mlp_act, w_down);
            }
        }
        self.check(comps, Point::new(l, Stage::PostMlp))
    }
}

/// Initializes a decomposition and propagates it to the LM head.
pub fn run_decomposed<T: Scalar>(
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    spec: &InitSpec<T>,
    opts: &RunOptions,
) -> Result<DecomposedRun<T>> {
    let init = init_decomposition(trace, weights, spec)?;
    run_from(trace, weights, init, opts)
}

/// Propagates an already initialized decomposition.
pub fn run_from<T: Scalar>(
    trace: &ForwardTrace<T>,
    weights: &WeightSet<T>,
    init: DecomposedState<T>,
    opts: &RunOptions,
) -> Result<DecomposedRun<T>> {
    check_trace(trace, weights)?;
    let c = weights.config();
    if opts.component_batch == 0 {
        return Err(Error::Usage("component_batch must be at least 1".into()));
    }
    let needed = init.seq_len() * init.num_components() * c.d_model.max(c.d_mlp);
    if needed > opts.max_elements {
        return Err(Error::Budget {
            needed,
            budget: opts.max_elements,
        });
    }
    let start = init.start;
    if let Some(&l) = opts
        .snapshot_layers
        .iter()
        .find(|&&l| l >= c.num_layers || l < start.layer)
    {
        return Err(Error::Input(format!(
            "snapshot layer {l} is outside the propagated range {}..{}",
            start.layer, c.num_layers
        )));
    }

    let mut runner = Runner {
        trace,
        weights,
        opts,
        log: Vec::new(),
        fallbacks: 0,
    };
    runner.check(&init.components, start)?;

    let mut comps = init.components.clone();
    let mut snapshots = BTreeMap::new();
    let snap = |comps: &[Matrix<T>], l: usize| DecomposedState {
        components: comps.to_vec(),
        labels: init.labels.clone(),
        start,
        point: Point::new(l, Stage::PostMlp),
    };

    for l in start.layer..c.num_layers {
        if l == start.layer {
            match start.stage {
                Stage::PreAttention => {
                    runner.attention(&mut comps, l)?;
                    runner.mlp(&mut comps, l)?;
                }
                Stage::PostAttention => runner.mlp(&mut comps, l)?,
                Stage::PostMlp => {}
                Stage::PostFinalNorm => unreachable!("initialization never starts after the final norm"),
            }
        } else {
            runner.attention(&mut comps, l)?;
            runner.mlp(&mut comps, l)?;
        }
        if opts.snapshot_layers.contains(&l) {
            snapshots.insert(l, snap(&comps, l));
        }
    }

    let final_state = snap(&comps, c.num_layers - 1);
    let normed: Vec<_> = comps
        .iter()
        .map(|comp| normalize_component(comp, &trace.final_scale, &weights.final_norm))
        .collect();
    let final_point = Point::new(c.num_layers, Stage::PostFinalNorm);
    runner.check(&normed, final_point)?;
    let final_normed = DecomposedState {
        components: normed,
        labels: init.labels.clone(),
        start,
        point: final_point,
    };
    Ok(DecomposedRun {
        init,
        final_state,
        final_normed,
        snapshots,
        reconstruction: runner.log,
        fallbacks: runner.fallbacks,
    })
}
