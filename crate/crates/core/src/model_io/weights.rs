//! Model parameters, deterministic generation and archive (de)serialization.

use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

use super::archive::{Archive, ArchiveWriter};
use super::config::{MlpKind, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Feed-forward weights. Rows of the up/gate matrices are the neuron
/// subkeys; columns of `w_down` are the neuron subvalues.
#[derive(Debug, Clone, PartialEq)]
pub enum MlpWeights<T> {
    Plain {
        /// d_mlp × D
        w_up: Matrix<T>,
        /// D × d_mlp
        w_down: Matrix<T>,
    },
    Gated {
        w_gate: Matrix<T>,
        w_up: Matrix<T>,
        w_down: Matrix<T>,
    },
}

impl<T: Scalar> MlpWeights<T> {
    pub fn w_down(&self) -> &Matrix<T> {
        match self {
            MlpWeights::Plain { w_down, .. } | MlpWeights::Gated { w_down, .. } => w_down,
        }
    }

    pub fn w_down_mut(&mut self) -> &mut Matrix<T> {
        match self {
            MlpWeights::Plain { w_down, .. } | MlpWeights::Gated { w_down, .. } => w_down,
        }
    }

    /// Subvalue of neuron `k` (column `k` of the down projection).
    pub fn subvalue(&self, k: usize) -> Vec<T> {
        self.w_down().column(k)
    }
}

/// Per-layer parameters. Projections use the row-vector convention:
/// `q = x · wq`, so `wq` is D × D, `wk`/`wv` are D × kv_dim, and `wo` is
/// D × D with rows grouped by head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Vec<T>,
    pub mlp: MlpWeights<T>,
}

impl<T: Scalar> LayerWeights<T> {
    /// `W_V^{g} W_O^{h}` for query head `h` (D × D).
    pub fn head_vo(&self, config: &ModelConfig, head: usize) -> Matrix<T> {
        let dh = config.head_dim();
        let g = config.kv_head_for(head);
        let wv = self.wv.column_block(g * dh, dh);
        let wo = self.wo.row_block(head * dh, dh);
        wv.matmul(&wo)
    }
}

#[derive(Debug, Clone)]
pub struct WeightSet<T> {
    config: ModelConfig,
    pub token_embeddings: Matrix<T>,
    layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Matrix<T>,
    fingerprint: OnceLock<String>,
}

impl<T: Scalar> PartialEq for WeightSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.token_embeddings == other.token_embeddings
            && self.layers == other.layers
            && self.final_norm == other.final_norm
            && self.lm_head == other.lm_head
    }
}

impl<T: Scalar> WeightSet<T> {
    /// Assembles a weight set, checking every shape against `config`.
    pub fn new(
        mut config: ModelConfig,
        token_embeddings: Matrix<T>,
        layers: Vec<LayerWeights<T>>,
        final_norm: Vec<T>,
        lm_head: Matrix<T>,
    ) -> Result<Self> {
        config.validate()?;
        config.numeric_precision = T::DTYPE;
        let ws = Self {
            config,
            token_embeddings,
            layers,
            final_norm,
            lm_head,
            fingerprint: OnceLock::new(),
        };
        ws.check_shapes()?;
        Ok(ws)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerWeights<T> {
        &self.layers[l]
    }

    /// Mutable access to a layer. Invalidates the cached fingerprint.
    pub fn layer_mut(&mut self, l: usize) -> &mut LayerWeights<T> {
        self.fingerprint = OnceLock::new();
        &mut self.layers[l]
    }

    /// Content hash of config and parameters (hex, 16 chars).
    pub fn fingerprint(&self) -> &str {
        self.fingerprint.get_or_init(|| {
            let mut h = Sha256::new();
            let mut cfg = self.config.clone();
            cfg.numeric_precision = T::DTYPE;
            h.update(serde_json::to_vec(&cfg).expect("config serializes"));
            let mut buf = Vec::new();
            self.for_each_tensor(|name, _shape, values| {
                h.update(name.as_bytes());
                buf.clear();
                for &v in values {
                    v.write_le(&mut buf);
                }
                h.update(&buf);
            });
            hex::encode(&h.finalize()[..8])
        })
    }

    /// Visits every tensor in manifest order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        let c = &self.config;
        let (d, dm) = (c.d_model, c.d_mlp);
        f("embed.tokens", &[c.vocab_size, d], self.token_embeddings.as_slice());
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("layers.{l}.attn_norm"), &[d], &layer.attn_norm);
            f(&format!("layers.{l}.attn.wq"), &[d, d], layer.wq.as_slice());
            f(&format!("layers.{l}.attn.wk"), &[d, c.kv_dim()], layer.wk.as_slice());
            f(&format!("layers.{l}.attn.wv"), &[d, c.kv_dim()], layer.wv.as_slice());
            f(&format!("layers.{l}.attn.wo"), &[d, d], layer.wo.as_slice());
            f(&format!("layers.{l}.mlp_norm"), &[d], &layer.mlp_norm);
            match &layer.mlp {
                MlpWeights::Plain { w_up, w_down } => {
                    f(&format!("layers.{l}.mlp.w_up"), &[dm, d], w_up.as_slice());
                    f(&format!("layers.{l}.mlp.w_down"), &[d, dm], w_down.as_slice());
                }
                MlpWeights::Gated { w_gate, w_up, w_down } => {
                    f(&format!("layers.{l}.mlp.w_gate"), &[dm, d], w_gate.as_slice());
                    f(&format!("layers.{l}.mlp.w_up"), &[dm, d], w_up.as_slice());
                    f(&format!("layers.{l}.mlp.w_down"), &[d, dm], w_down.as_slice());
                }
            }
        }
        f("final_norm", &[d], &self.final_norm);
        f("lm_head", &[c.vocab_size, d], self.lm_head.as_slice());
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        if self.layers.len() != c.num_layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                c.num_layers,
                self.layers.len()
            )));
        }
        for l in &self.layers {
            let gated = matches!(l.mlp, MlpWeights::Gated { .. });
            if gated != (c.mlp_kind == MlpKind::Gated) {
                return Err(Error::Config("MLP weights do not match mlp_kind".into()));
            }
        }
        let mut bad = None;
        self.for_each_tensor(|name, shape, values| {
            let numel: usize = shape.iter().product();
            if bad.is_none() && numel != values.len() {
                bad = Some(format!(
                    "tensor {name} has {} values, config implies shape {shape:?}",
                    values.len()
                ));
            }
        });
        let matrices = [
            ("embed.tokens", self.token_embeddings.shape(), (c.vocab_size, c.d_model)),
            ("lm_head", self.lm_head.shape(), (c.vocab_size, c.d_model)),
        ];
        for (name, got, want) in matrices {
            if bad.is_none() && got != want {
                bad = Some(format!("tensor {name} is {got:?}, config implies {want:?}"));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mut checks = vec![
                ("attn.wq", l.wq.shape(), (c.d_model, c.d_model)),
                ("attn.wk", l.wk.shape(), (c.d_model, c.kv_dim())),
                ("attn.wv", l.wv.shape(), (c.d_model, c.kv_dim())),
                ("attn.wo", l.wo.shape(), (c.d_model, c.d_model)),
                ("mlp.w_down", l.mlp.w_down().shape(), (c.d_model, c.d_mlp)),
            ];
            match &l.mlp {
                MlpWeights::Plain { w_up, .. } => checks.push(("mlp.w_up", w_up.shape(), (c.d_mlp, c.d_model))),
                MlpWeights::Gated { w_gate, w_up, .. } => {
                    checks.push(("mlp.w_gate", w_gate.shape(), (c.d_mlp, c.d_model)));
                    checks.push(("mlp.w_up", w_up.shape(), (c.d_mlp, c.d_model)));
                }
            }
            for (name, got, want) in checks {
                if bad.is_none() && got != want {
                    bad = Some(format!("tensor layers.{i}.{name} is {got:?}, config implies {want:?}"));
                }
            }
            if bad.is_none() && (l.attn_norm.len() != c.d_model || l.mlp_norm.len() != c.d_model) {
                bad = Some(format!("layer {i} norm gain length differs from d_model"));
            }
        }
        if bad.is_none() && self.final_norm.len() != c.d_model {
            bad = Some("final_norm length differs from d_model".into());
        }
        match bad {
            Some(msg) => Err(Error::Config(msg)),
            None => Ok(()),
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        let vec_cast = |v: &[T]| v.iter().map(|&x| U::of_f64(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                attn_norm: vec_cast(&l.attn_norm),
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                mlp_norm: vec_cast(&l.mlp_norm),
                mlp: match &l.mlp {
                    MlpWeights::Plain { w_up, w_down } => MlpWeights::Plain {
                        w_up: w_up.cast(),
                        w_down: w_down.cast(),
                    },
                    MlpWeights::Gated { w_gate, w_up, w_down } => MlpWeights::Gated {
                        w_gate: w_gate.cast(),
                        w_up: w_up.cast(),
                        w_down: w_down.cast(),
                    },
                },
            })
            .collect();
        WeightSet::new(
            self.config.clone(),
            self.token_embeddings.cast(),
            layers,
            vec_cast(&self.final_norm),
            self.lm_head.cast(),
        )
        .expect("cast preserves shapes")
    }
}

/// Draws every weight i.i.d. uniform on `[-1/sqrt(D), 1/sqrt(D))` from a
/// SplitMix64 stream seeded with `seed`, consuming tensors in manifest order
/// (norm gains are all ones and draw nothing).
pub fn generate_random_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<WeightSet<T>> {
    config.validate()?;
    let c = config;
    let bound = 1.0 / (c.d_model as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let mut draw = |rows: usize, cols: usize| -> Matrix<T> {
        let data = (0..rows * cols)
            .map(|_| T::of_f64(rng.uniform_symmetric(bound)))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let ones = || vec![T::one(); c.d_model];

    let token_embeddings = draw(c.vocab_size, c.d_model);
    let mut layers = Vec::with_capacity(c.num_layers);
    for _ in 0..c.num_layers {
        let wq = draw(c.d_model, c.d_model);
        let wk = draw(c.d_model, c.kv_dim());
        let wv = draw(c.d_model, c.kv_dim());
        let wo = draw(c.d_model, c.d_model);
        let mlp = match c.mlp_kind {
            MlpKind::Plain => {
                let w_up = draw(c.d_mlp, c.d_model);
                let w_down = draw(c.d_model, c.d_mlp);
                MlpWeights::Plain { w_up, w_down }
            }
            MlpKind::Gated => {
                let w_gate = draw(c.d_mlp, c.d_model);
                let w_up = draw(c.d_mlp, c.d_model);
                let w_down = draw(c.d_model, c.d_mlp);
                MlpWeights::Gated { w_gate, w_up, w_down }
            }
        };
        layers.push(LayerWeights {
            attn_norm: ones(),
            wq,
            wk,
            wv,
            wo,
            mlp_norm: ones(),
            mlp,
        });
    }
    let lm_head = draw(c.vocab_size, c.d_model);
    WeightSet::new(c.clone(), token_embeddings, layers, ones(), lm_head)
}

pub fn weights_to_archive<T: Scalar>(ws: &WeightSet<T>) -> ArchiveWriter {
    let mut w = ArchiveWriter::new();
    w.metadata("kind", "weights".into());
    w.metadata("config", serde_json::to_value(ws.config()).expect("config serializes"));
    ws.for_each_tensor(|name, shape, values| {
        w.add(name, shape, values);
    });
    w
}

pub fn save_weights<T: Scalar>(ws: &WeightSet<T>, path: impl AsRef<Path>) -> Result<()> {
    weights_to_archive(ws).write(path)
}

/// Reads the model configuration stored in an archive without decoding
/// tensors (used to dispatch on precision).
pub fn read_config(archive: &Archive) -> Result<ModelConfig> {
    let value = archive
        .metadata("config")
        .ok_or_else(|| Error::ArchiveFormat("archive has no model config".into()))?;
    let config: ModelConfig =
        serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn weights_from_archive<T: Scalar>(archive: &Archive) -> Result<(ModelConfig, WeightSet<T>)> {
    let config = read_config(archive)?;
    if config.numeric_precision != T::DTYPE {
        return Err(Error::Config(format!(
            "archive precision is {}, requested {}",
            config.numeric_precision.name(),
            T::DTYPE.name()
        )));
    }
    let c = &config;
    let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix<T>> {
        let (shape, values) = archive.tensor::<T>(name)?;
        if shape != [rows, cols] {
            return Err(Error::Config(format!(
                "tensor {name} has shape {shape:?}, config implies [{rows}, {cols}]"
            )));
        }
        Ok(Matrix::from_vec(rows, cols, values))
    };
    let vector = |name: &str| -> Result<Vec<T>> {
        let (shape, values) = archive.tensor::<T>(name)?;
        if shape != [c.d_model] {
            return Err(Error::Config(format!(
                "tensor {name} has shape {shape:?}, config implies [{}]",
                c.d_model
            )));
        }
        Ok(values)
    };
    let token_embeddings = matrix("embed.tokens", c.vocab_size, c.d_model)?;
    let mut layers = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let mlp = match c.mlp_kind {
            MlpKind::Plain => MlpWeights::Plain {
                w_up: matrix(&p("mlp.w_up"), c.d_mlp, c.d_model)?,
                w_down: matrix(&p("mlp.w_down"), c.d_model, c.d_mlp)?,
            },
            MlpKind::Gated => MlpWeights::Gated {
                w_gate: matrix(&p("mlp.w_gate"), c.d_mlp, c.d_model)?,
                w_up: matrix(&p("mlp.w_up"), c.d_mlp, c.d_model)?,
                w_down: matrix(&p("mlp.w_down"), c.d_model, c.d_mlp)?,
            },
        };
        layers.push(LayerWeights {
            attn_norm: vector(&p("attn_norm"))?,
            wq: matrix(&p("attn.wq"), c.d_model, c.d_model)?,
            wk: matrix(&p("attn.wk"), c.d_model, c.kv_dim())?,
            wv: matrix(&p("attn.wv"), c.d_model, c.kv_dim())?,
            wo: matrix(&p("attn.wo"), c.d_model, c.d_model)?,
            mlp_norm: vector(&p("mlp_norm"))?,
            mlp,
        });
    }
    let final_norm = vector("final_norm")?;
    let lm_head = matrix("lm_head", c.vocab_size, c.d_model)?;
    let ws = WeightSet::new(config.clone(), token_embeddings, layers, final_norm, lm_head)?;
    Ok((config, ws))
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightSet<T>)> {
    weights_from_archive(&Archive::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 1,
            num_kv_heads: 1,
            d_model: 2,
            d_mlp: 3,
            vocab_size: 4,
            max_seq_len: 8,
            ..ModelConfig::fixture()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_random_model::<f64>(&tiny(), 7).unwrap();
        let b = generate_random_model::<f64>(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_random_model::<f64>(&tiny(), 8).unwrap();
        assert_ne!(a, c);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn norm_gains_start_at_one() {
        let ws = generate_random_model::<f32>(&tiny(), 7).unwrap();
        assert!(ws.layer(0).attn_norm.iter().all(|&g| g == 1.0));
        assert!(ws.layer(0).mlp_norm.iter().all(|&g| g == 1.0));
        assert!(ws.final_norm.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn values_respect_bound() {
        let ws = generate_random_model::<f64>(&ModelConfig::fixture(), 42).unwrap();
        let bound = 1.0 / 8.0;
        ws.for_each_tensor(|name, _, vals| {
            if !name.ends_with("norm") {
                assert!(vals.iter().all(|v| v.abs() <= bound), "{name}");
            }
        });
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = tiny();
        c.num_layers = 0;
        assert!(matches!(generate_random_model::<f64>(&c, 1), Err(Error::Config(_))));
    }

    #[test]
    fn layer_mut_invalidates_fingerprint() {
        let mut ws = generate_random_model::<f64>(&tiny(), 7).unwrap();
        let before = ws.fingerprint().to_string();
        ws.layer_mut(0).wo = Matrix::zeros(2, 2);
        assert_ne!(before, ws.fingerprint());
    }

    #[test]
    fn shape_mismatch_in_archive_is_config_error() {
        let ws = generate_random_model::<f64>(&tiny(), 1).unwrap();
        let mut bad_cfg = tiny();
        bad_cfg.d_mlp = 5;
        let mut w = weights_to_archive(&ws);
        w.metadata("config", serde_json::to_value(&bad_cfg).unwrap());
        let archive = Archive::from_bytes(&w.to_bytes()).unwrap();
        assert!(matches!(weights_from_archive::<f64>(&archive), Err(Error::Config(_))));
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let ws = generate_random_model::<f32>(&tiny(), 1).unwrap();
        let archive = Archive::from_bytes(&weights_to_archive(&ws).to_bytes()).unwrap();
        assert!(weights_from_archive::<f64>(&archive).is_err());
        let (_, back) = weights_from_archive::<f32>(&archive).unwrap();
        assert_eq!(back, ws);
    }
}
