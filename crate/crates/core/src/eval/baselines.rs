//! Gradient-free attention baselines read at the last query position.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    /// Mean over layers and heads of the last query row.
    AttentionMean,
    /// Head mean of the final layer's last query row.
    AttentionLast,
    AttentionRollout,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::AttentionMean => "attention_mean",
            BaselineMethod::AttentionLast => "attention_last",
            BaselineMethod::AttentionRollout => "attention_rollout",
        }
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_mean" => Ok(Self::AttentionMean),
            "attention_last" => Ok(Self::AttentionLast),
            "attention_rollout" | "rollout" => Ok(Self::AttentionRollout),
            _ => Err(Error::Usage(format!("unknown baseline {s:?}"))),
        }
    }
}

fn head_mean<T: Scalar>(probs: &[Matrix<T>]) -> Matrix<f64> {
    let (n, _) = probs[0].shape();
    let mut out = Matrix::zeros(n, n);
    for a in probs {
        for (o, v) in out.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *o += v.as_f64();
        }
    }
    out.scale(1.0 / probs.len() as f64)
}

/// `Π_l normalize((Ā_l + I)/2)`, composed so the last layer is leftmost.
/// `layers[l]` holds the per-head attention matrices of layer `l`.
pub fn attention_rollout<T: Scalar>(layers: &[Vec<Matrix<T>>]) -> Matrix<f64> {
    let n = layers.first().map_or(0, |l| l[0].rows());
    let mut rollout = Matrix::<f64>::identity(n);
    for probs in layers {
        let mut b = head_mean(probs);
        for i in 0..n {
            b[(i, i)] += 1.0;
            let row = b.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        rollout = b.matmul(&rollout);
    }
    rollout
}

pub fn baseline_scores<T: Scalar>(trace: &ForwardTrace<T>, method: BaselineMethod) -> Vec<f64> {
    let last = trace.seq_len() - 1;
    match method {
        BaselineMethod::AttentionMean => {
            let mut acc = vec![0.0; trace.seq_len()];
            let mut count = 0.0;
            for lt in &trace.layers {
                for a in &lt.attn_probs {
                    acc.iter_mut().zip(a.row(last)).for_each(|(s, v)| *s += v.as_f64());
                    count += 1.0;
                }
            }
            acc.into_iter().map(|s| s / count).collect()
        }
        BaselineMethod::AttentionLast => {
            let lt = trace.layers.last().expect("model has at least one layer");
            head_mean(&lt.attn_probs).row(last).to_vec()
        }
        BaselineMethod::AttentionRollout => {
            let layers: Vec<_> = trace.layers.iter().map(|lt| lt.attn_probs.clone()).collect();
            attention_rollout(&layers).row(last).to_vec()
        }
    }
}
