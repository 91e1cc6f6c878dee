//! Standard forward pass with trace capture.
//!
//! The trace records every quantity the decomposed pass freezes: per-layer
//! RMS scale factors, attention probabilities and MLP activations.

use std::collections::BTreeSet;

use serde_json::json;

use crate::error::{Error, Result};
use crate::model_io::{ArchiveWriter, MlpWeights, ModelConfig, WeightSet};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::Matrix;

/// `gain ⊙ x / sqrt(mean(x²) + eps)`, returned with the scalar scale
/// `1 / sqrt(mean(x²) + eps)`.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Result<(Vec<T>, T)> {
    let scale = rms_scale(x, eps)?;
    Ok((x.iter().zip(gain).map(|(&v, &g)| g * (v * scale)).collect(), scale))
}

pub fn rms_scale<T: Scalar>(x: &[T], eps: f64) -> Result<T> {
    if eps < 0.0 {
        return Err(Error::NumericDomain(format!("negative norm epsilon {eps}")));
    }
    let mean_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::of_usize(x.len());
    let denom = mean_sq + T::of_f64(eps);
    if denom <= T::zero() {
        return Err(Error::NumericDomain("RMS of a zero vector with eps = 0".into()));
    }
    let scale = T::one() / denom.sqrt();
    if !scale.is_finite() {
        return Err(Error::NumericDomain("RMS scale is not finite".into()));
    }
    Ok(scale)
}

/// Units forced to zero during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ablation {
    /// `(layer, head)`: the head's `W_V W_O` path contributes nothing.
    pub heads: BTreeSet<(usize, usize)>,
    /// `(layer, neuron)`: activation zeroed before the down projection.
    pub neurons: BTreeSet<(usize, usize)>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty() && self.neurons.is_empty()
    }

    fn validate(&self, c: &ModelConfig) -> Result<()> {
        for &(l, h) in &self.heads {
            if l >= c.num_layers || h >= c.num_heads {
                return Err(Error::Usage(format!("head ({l}, {h}) out of range")));
            }
        }
        for &(l, k) in &self.neurons {
            if l >= c.num_layers || k >= c.d_mlp {
                return Err(Error::Usage(format!("neuron ({l}, {k}) out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    /// Residual stream entering the layer, N × D.
    pub hidden_in: Matrix<T>,
    pub attn_scale: Vec<T>,
    /// One N × N causal probability matrix per query head.
    pub attn_probs: Vec<Matrix<T>>,
    /// Residual stream after the attention sublayer, N × D.
    pub attn_state: Matrix<T>,
    pub mlp_scale: Vec<T>,
    /// Pre-activations fed to the nonlinearity (gate pre-activations for a
    /// gated MLP), N × d_mlp.
    pub mlp_preact: Matrix<T>,
    /// Up-projection values of a gated MLP.
    pub mlp_up: Option<Matrix<T>>,
    /// Neuron activations entering the down projection, N × d_mlp.
    pub mlp_act: Matrix<T>,
    pub hidden_out: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<usize>,
    pub model_fingerprint: String,
    pub embeddings: Matrix<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub final_scale: Vec<T>,
    /// Final-norm output, N × D.
    pub final_normed: Matrix<T>,
    /// N × V
    pub logits: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn final_hidden(&self) -> &Matrix<T> {
        &self.layers.last().expect("at least one layer").hidden_out
    }

    pub fn last_logits(&self) -> &[T] {
        self.logits.row(self.seq_len() - 1)
    }

    /// Residual stream after layer `l`'s block.
    pub fn hidden_after(&self, l: usize) -> &Matrix<T> {
        &self.layers[l].hidden_out
    }

    pub fn to_archive(&self) -> ArchiveWriter {
        let n = self.seq_len();
        let d = self.embeddings.cols();
        let mut w = ArchiveWriter::new();
        w.metadata("kind", "trace".into());
        w.metadata("tokens", json!(self.tokens));
        w.metadata("model_fingerprint", json!(self.model_fingerprint));
        w.add("embeddings", &[n, d], self.embeddings.as_slice());
        for (l, lt) in self.layers.iter().enumerate() {
            let h = lt.attn_probs.len();
            let probs: Vec<T> = lt
                .attn_probs
                .iter()
                .flat_map(|a| a.as_slice().iter().copied())
                .collect();
            let dm = lt.mlp_act.cols();
            w.add(format!("layers.{l}.hidden_in"), &[n, d], lt.hidden_in.as_slice());
            w.add(format!("layers.{l}.attn_scale"), &[n], &lt.attn_scale);
            w.add(format!("layers.{l}.attn_probs"), &[h, n, n], &probs);
            w.add(format!("layers.{l}.attn_state"), &[n, d], lt.attn_state.as_slice());
            w.add(format!("layers.{l}.mlp_scale"), &[n], &lt.mlp_scale);
            w.add(format!("layers.{l}.mlp_preact"), &[n, dm], lt.mlp_preact.as_slice());
            if let Some(up) = &lt.mlp_up {
                w.add(format!("layers.{l}.mlp_up"), &[n, dm], up.as_slice());
            }
            w.add(format!("layers.{l}.mlp_act"), &[n, dm], lt.mlp_act.as_slice());
            w.add(format!("layers.{l}.hidden_out"), &[n, d], lt.hidden_out.as_slice());
        }
        w.add("final_scale", &[n], &self.final_scale);
        w.add("final_normed", &[n, d], self.final_normed.as_slice());
        w.add("logits", &[n, self.logits.cols()], self.logits.as_slice());
        w
    }
}

fn validate_tokens(tokens: &[usize], c: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocabulary of {}",
            c.vocab_size
        )));
    }
    Ok(())
}

/// Normalizes every row, returning the normalized matrix and per-row scales.
pub(crate) fn rmsnorm_rows<T: Scalar>(x: &Matrix<T>, gain: &[T], eps: f64) -> Result<(Matrix<T>, Vec<T>)> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let (row, s) = rmsnorm(x.row(i), gain, eps)?;
        out.row_mut(i).copy_from_slice(&row);
        scales.push(s);
    }
    Ok((out, scales))
}

/// Rotate-half rotary embedding applied in place to each `head_dim` block.
fn apply_rope<T: Scalar>(m: &mut Matrix<T>, heads: usize, head_dim: usize, theta: f64) {
    let half = head_dim / 2;
    for pos in 0..m.rows() {
        let row = m.row_mut(pos);
        for h in 0..heads {
            let block = &mut row[h * head_dim..(h + 1) * head_dim];
            for j in 0..half {
                let freq = theta.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                let (sin, cos) = (T::of_f64(angle.sin()), T::of_f64(angle.cos()));
                let (a, b) = (block[j], block[j + half]);
                block[j] = a * cos - b * sin;
                block[j + half] = a * sin + b * cos;
            }
        }
    }
}

pub fn forward<T: Scalar>(tokens: &[usize], weights: &WeightSet<T>) -> Result<ForwardTrace<T>> {
    forward_with(tokens, weights, &Ablation::none())
}

/// Forward pass with the units in `ablation` zeroed.
pub fn forward_with<T: Scalar>(
    tokens: &[usize],
    weights: &WeightSet<T>,
    ablation: &Ablation,
) -> Result<ForwardTrace<T>> {
    let c = weights.config();
    validate_tokens(tokens, c)?;
    ablation.validate(c)?;
    let n = tokens.len();
    let (d, dh) = (c.d_model, c.head_dim());
    let inv_sqrt_dh = T::one() / T::of_usize(dh).sqrt();

    let mut x = Matrix::zeros(n, d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(weights.token_embeddings.row(t));
    }
    let embeddings = x.clone();

    let mut layers = Vec::with_capacity(c.num_layers);
    for (l, lw) in weights.layers().iter().enumerate() {
        let hidden_in = x;
        let (xn, attn_scale) = rmsnorm_rows(&hidden_in, &lw.attn_norm, c.norm_eps)?;
        let mut q = xn.matmul(&lw.wq);
        let mut k = xn.matmul(&lw.wk);
        let v = xn.matmul(&lw.wv);
        if c.rope {
            apply_rope(&mut q, c.num_heads, dh, c.rope_theta);
            apply_rope(&mut k, c.num_kv_heads, dh, c.rope_theta);
        }

        let mut attn_probs = Vec::with_capacity(c.num_heads);
        let mut z = Matrix::zeros(n, d);
        for h in 0..c.num_heads {
            let g = c.kv_head_for(h);
            let mut a = Matrix::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[h * dh..(h + 1) * dh];
                let row = a.row_mut(i);
                for j in 0..=i {
                    let kj = &k.row(j)[g * dh..(g + 1) * dh];
                    row[j] = crate::scalar::dot(qi, kj) * inv_sqrt_dh;
                }
                softmax_in_place(&mut row[..=i]);
            }
            if !ablation.heads.contains(&(l, h)) {
                for i in 0..n {
                    for j in 0..=i {
                        let p = a[(i, j)];
                        let vj = &v.row(j)[g * dh..(g + 1) * dh];
                        let zi = &mut z.row_mut(i)[h * dh..(h + 1) * dh];
                        for (o, &vv) in zi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            attn_probs.push(a);
        }
        let attn_state = hidden_in.add(&z.matmul(&lw.wo));

        let (xm, mlp_scale) = rmsnorm_rows(&attn_state, &lw.mlp_norm, c.norm_eps)?;
        let (mlp_preact, mlp_up, mut mlp_act) = match &lw.mlp {
            MlpWeights::Plain { w_up, .. } => {
                let pre = xm.matmul_t(w_up);
                let act = pre.map(|v| c.activation.apply_t(v));
                (pre, None, act)
            }
            MlpWeights::Gated { w_gate, w_up, .. } => {
                let gate = xm.matmul_t(w_gate);
                let up = xm.matmul_t(w_up);
                let mut act = gate.map(|v| c.activation.apply_t(v));
                for (a, &u) in act.as_mut_slice().iter_mut().zip(up.as_slice()) {
                    *a *= u;
                }
                (gate, Some(up), act)
            }
        };
        for &(_, kk) in ablation.neurons.range((l, 0)..(l + 1, 0)) {
            for i in 0..n {
                mlp_act[(i, kk)] = T::zero();
            }
        }
        let hidden_out = attn_state.add(&mlp_act.matmul_t(lw.mlp.w_down()));
        x = hidden_out.clone();
        layers.push(LayerTrace {
            hidden_in,
            attn_scale,
            attn_probs,
            attn_state,
            mlp_scale,
            mlp_preact,
            mlp_up,
            mlp_act,
            hidden_out,
        });
    }

    let (final_normed, final_scale) = rmsnorm_rows(&x, &weights.final_norm, c.norm_eps)?;
    let logits = final_normed.matmul_t(&weights.lm_head);
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        model_fingerprint: weights.fingerprint().to_string(),
        embeddings,
        layers,
        final_scale,
        final_normed,
        logits,
    })
}

/// Softmax of one logits row.
pub fn next_token_distribution<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite logits".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

/// Index of the largest logit; ties go to the lowest id.
pub fn greedy_argmax<T: Scalar>(logits: &[T]) -> Result<usize> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite or empty logits".into()));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}
