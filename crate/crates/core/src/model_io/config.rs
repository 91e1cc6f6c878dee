use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    Plain,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn apply_t<T: crate::Scalar>(self, x: T) -> T {
        let half = T::of_f64(0.5);
        match self {
            Activation::Gelu => {
                let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
                let k = T::of_f64(0.044_715);
                half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }
}

/// Architecture hyper-parameters of a bias-free pre-norm decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_kind: MlpKind,
    pub activation: Activation,
    #[serde(default)]
    pub rope: bool,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_precision")]
    pub numeric_precision: DType,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_precision() -> DType {
    DType::F64
}

impl ModelConfig {
    /// The desk-scale fixture used across the test-suite: L=4, H=4, D=64,
    /// d_mlp=128, V=97.
    pub fn fixture() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            num_kv_heads: 4,
            d_model: 64,
            d_mlp: 128,
            vocab_size: 97,
            max_seq_len: 64,
            mlp_kind: MlpKind::Plain,
            activation: Activation::Gelu,
            rope: false,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            numeric_precision: DType::F64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    pub fn kv_head_for(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_kv_heads > self.num_heads || !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "num_kv_heads {} must divide num_heads {}",
                self.num_kv_heads, self.num_heads
            )));
        }
        if !(self.norm_eps >= 0.0) || !self.norm_eps.is_finite() {
            return Err(Error::Config(format!("norm_eps must be >= 0, got {}", self.norm_eps)));
        }
        if self.rope {
            if !self.head_dim().is_multiple_of(2) {
                return Err(Error::Config("rope requires an even head dimension".into()));
            }
            if !(self.rope_theta > 0.0) || !self.rope_theta.is_finite() {
                return Err(Error::Config("rope_theta must be positive".into()));
            }
        }
        Ok(())
    }
}
