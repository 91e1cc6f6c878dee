//! Multinomial logistic-regression probes over hidden states.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model_io::{Archive, ArchiveWriter};
use crate::rng::SplitMix64;
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::Matrix;
use crate::transformer::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyperParams {
    pub lr: f64,
    pub steps: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeHyperParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps: 1000,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub hyper: ProbeHyperParams,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Objective before each step and after the last one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

/// `f(x) = W x + b` with `C ≥ 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe<T> {
    /// C × D
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub class_labels: Vec<String>,
    pub layer: Option<usize>,
    pub training: Option<TrainingSummary>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::Input("a probe needs at least two classes".into()));
        }
        if bias.len() != weights.rows() {
            return Err(Error::Input("bias length differs from class count".into()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericDomain("probe parameters are not finite".into()));
        }
        let class_labels = (0..weights.rows()).map(|c| c.to_string()).collect();
        Ok(Self {
            weights,
            bias,
            class_labels,
            layer: None,
            training: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!(
                "probe expects {}-dimensional input, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok((0..self.num_classes())
            .map(|c| crate::scalar::dot(self.weights.row(c), x) + self.bias[c])
            .collect())
    }

    /// Class direction for attribution: `W[c] − mean_{c' ≠ c} W[c']`.
    /// For two classes this is the logit-difference direction.
    pub fn class_direction(&self, class: usize) -> Vec<T> {
        let c = self.num_classes();
        let others = T::of_usize(c - 1);
        (0..self.dim())
            .map(|d| {
                let rest = (0..c)
                    .filter(|&o| o != class)
                    .fold(T::zero(), |s, o| s + self.weights[(o, d)]);
                self.weights[(class, d)] - rest / others
            })
            .collect()
    }

    pub fn predict_class(&self, x: &[T]) -> Result<usize> {
        crate::transformer::greedy_argmax(&self.logits(x)?)
    }

    pub fn write_into(&self, w: &mut ArchiveWriter, prefix: &str) {
        w.add(
            format!("{prefix}.weight"),
            &[self.num_classes(), self.dim()],
            self.weights.as_slice(),
        );
        w.add(format!("{prefix}.bias"), &[self.num_classes()], &self.bias);
    }

    pub fn to_archive(&self) -> ArchiveWriter {
        let mut w = ArchiveWriter::new();
        w.metadata("kind", "probe".into());
        w.metadata("class_labels", json!(self.class_labels));
        w.metadata("layer", json!(self.layer));
        if let Some(t) = &self.training {
            let mut t = t.clone();
            t.loss_history.clear();
            w.metadata("training", serde_json::to_value(t).expect("summary serializes"));
        }
        self.write_into(&mut w, "probe");
        w
    }

    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let (ws, wv) = archive.tensor_f64(&format!("{prefix}.weight"))?;
        let (bs, bv) = archive.tensor_f64(&format!("{prefix}.bias"))?;
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(Error::ArchiveFormat(format!(
                "probe tensors have shapes {ws:?} / {bs:?}"
            )));
        }
        let weights = Matrix::from_vec(ws[0], ws[1], wv.into_iter().map(T::of_f64).collect());
        LinearProbe::new(weights, bv.into_iter().map(T::of_f64).collect())
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut p = Self::read_from(archive, "probe")?;
        if let Some(labels) = archive
            .metadata("class_labels")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
        {
            p.class_labels = labels;
        }
        p.layer = archive.metadata("layer").and_then(|v| v.as_u64()).map(|l| l as usize);
        p.training = archive
            .metadata("training")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        Ok(p)
    }
}

/// Class probabilities `softmax(W x + b)`.
pub fn probe_predict<T: Scalar>(probe: &LinearProbe<T>, x: &[T]) -> Result<Vec<T>> {
    let mut z = probe.logits(x)?;
    softmax_in_place(&mut z);
    Ok(z)
}

fn objective<T: Scalar>(w: &Matrix<T>, b: &[T], feats: &Matrix<T>, labels: &[usize], l2: f64) -> (f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let x = feats.row(i);
        let z: Vec<f64> = (0..w.rows())
            .map(|c| (crate::scalar::dot(w.row(c), x) + b[c]).as_f64())
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        let pred = (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best });
        if pred == y {
            correct += 1;
        }
    }
    let reg: f64 = w.as_slice().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    (loss / labels.len() as f64 + 0.5 * l2 * reg, correct)
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 · ‖W‖²`.
///
/// Parameters start at zero. The seed only fixes the order in which
/// per-example gradients are accumulated.
pub fn train_probe<T: Scalar>(features: &Matrix<T>, labels: &[usize], hp: &ProbeHyperParams) -> Result<LinearProbe<T>> {
    let k = features.rows();
    if labels.len() != k {
        return Err(Error::Training(format!("{k} feature rows but {} labels", labels.len())));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Training("labels must cover at least two classes".into()));
    }
    if k < classes {
        return Err(Error::Training(format!("{k} examples for {classes} classes")));
    }
    if !(hp.lr > 0.0) || !(hp.l2 >= 0.0) {
        return Err(Error::Training(
            "learning rate must be positive and l2 non-negative".into(),
        ));
    }

    let d = features.cols();
    let mut order: Vec<usize> = (0..k).collect();
    SplitMix64::new(hp.seed).shuffle(&mut order);

    let mut w = Matrix::<T>::zeros(classes, d);
    let mut b = vec![T::zero(); classes];
    let lr = T::of_f64(hp.lr);
    let l2 = T::of_f64(hp.l2);
    let inv_k = T::one() / T::of_usize(k);
    let mut history = Vec::with_capacity(hp.steps + 1);
    let mut probs = vec![T::zero(); classes];

    for _ in 0..hp.steps {
        history.push(objective(&w, &b, features, labels, hp.l2).0);
        let mut gw = Matrix::<T>::zeros(classes, d);
        let mut gb = vec![T::zero(); classes];
        for &i in &order {
            let x = features.row(i);
            for c in 0..classes {
                probs[c] = crate::scalar::dot(w.row(c), x) + b[c];
            }
            softmax_in_place(&mut probs);
            probs[labels[i]] -= T::one();
            for c in 0..classes {
                let g = probs[c];
                gb[c] += g;
                for (acc, &xv) in gw.row_mut(c).iter_mut().zip(x) {
                    *acc += g * xv;
                }
            }
        }
        for (wv, &gv) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *wv -= lr * (gv * inv_k + l2 * *wv);
        }
        for (bv, &gv) in b.iter_mut().zip(&gb) {
            *bv -= lr * gv * inv_k;
        }
    }
    let (final_loss, correct) = objective(&w, &b, features, labels, hp.l2);
    history.push(final_loss);
    if !final_loss.is_finite() {
        return Err(Error::Training("loss diverged".into()));
    }
    let mut probe = LinearProbe::new(w, b)?;
    probe.training = Some(TrainingSummary {
        hyper: *hp,
        final_loss,
        train_accuracy: correct as f64 / k as f64,
        loss_history: history,
    });
    Ok(probe)
}

pub fn accuracy<T: Scalar>(probe: &LinearProbe<T>, features: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if probe.predict_class(features.row(i))? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Default first layer for probe averaging: 10 when the model is deeper than
/// that, otherwise `⌈L/2⌉`.
pub fn default_min_layer(num_layers: usize) -> usize {
    if num_layers > 10 {
        10
    } else {
        num_layers.div_ceil(2)
    }
}

/// Per-layer probes with a designated "untruthful" class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet<T> {
    pub probes: BTreeMap<usize, LinearProbe<T>>,
    pub untruthful_class: usize,
}

impl<T: Scalar> ProbeSet<T> {
    pub fn to_archive(&self) -> ArchiveWriter {
        let mut w = ArchiveWriter::new();
        w.metadata("kind", "probe_set".into());
        w.metadata("untruthful_class", json!(self.untruthful_class));
        w.metadata("layers", json!(self.probes.keys().collect::<Vec<_>>()));
        for (l, p) in &self.probes {
            p.write_into(&mut w, &format!("probes.{l}"));
        }
        w
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let layers: Vec<usize> = archive
            .metadata("layers")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::ArchiveFormat("probe set has no layer list".into()))?;
        let untruthful_class = archive
            .metadata("untruthful_class")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        let mut probes = BTreeMap::new();
        for l in layers {
            let mut p = LinearProbe::read_from(archive, &format!("probes.{l}"))?;
            p.layer = Some(l);
            probes.insert(l, p);
        }
        Ok(Self {
            probes,
            untruthful_class,
        })
    }

    /// Probes at layers `≥ min_layer`.
    pub fn band(&self, min_layer: usize) -> impl Iterator<Item = (usize, &LinearProbe<T>)> {
        self.probes.range(min_layer..).map(|(&l, p)| (l, p))
    }
}

/// Mean probability of the untruthful class per token, averaged over the
/// probes at layers `≥ min_layer` (read at each layer's output).
pub fn mean_untruthful_probability<T: Scalar>(
    trace: &ForwardTrace<T>,
    probes: &ProbeSet<T>,
    min_layer: usize,
) -> Result<Vec<f64>> {
    let band: Vec<_> = probes
        .band(min_layer)
        .filter(|(l, _)| *l < trace.layers.len())
        .collect();
    if band.is_empty() {
        return Err(Error::Input(format!("no probes at layers >= {min_layer}")));
    }
    let n = trace.seq_len();
    let mut means = vec![0.0; n];
    for (l, probe) in &band {
        if probes.untruthful_class >= probe.num_classes() {
            return Err(Error::Input("untruthful class exceeds probe class count".into()));
        }
        let h = trace.hidden_after(*l);
        for (i, mean) in means.iter_mut().enumerate() {
            *mean += probe_predict(probe, h.row(i))?[probes.untruthful_class].as_f64();
        }
    }
    means.iter_mut().for_each(|m| *m /= band.len() as f64);
    Ok(means)
}

/// Tokens whose mean untruthful probability exceeds one half.
pub fn flag_tokens(means: &[f64]) -> Vec<bool> {
    means.iter().map(|&m| m > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(n: usize) -> (Matrix<f64>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            rows.push(vec![-1.0]);
            labels.push(0);
            rows.push(vec![1.0]);
            labels.push(1);
        }
        (Matrix::from_rows(&rows), labels)
    }

    #[test]
    fn separable_one_dimensional() {
        let (x, y) = one_d(50);
        let hp = ProbeHyperParams {
            lr: 0.1,
            steps: 500,
            ..Default::default()
        };
        let p = train_probe(&x, &y, &hp).unwrap();
        assert_eq!(p.training.as_ref().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn zero_features_predict_majority() {
        let x = Matrix::<f64>::zeros(10, 3);
        let y = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let p = train_probe(&x, &y, &ProbeHyperParams::default()).unwrap();
        assert_eq!(p.predict_class(&[0.0; 3]).unwrap(), 1);
        assert!((accuracy(&p, &x, &y).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn duplicated_data_gives_same_probe() {
        let (x, y) = one_d(5);
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .flat_map(|i| [x.row(i).to_vec(), x.row(i).to_vec()])
            .collect();
        let y2: Vec<usize> = y.iter().flat_map(|&l| [l, l]).collect();
        let hp = ProbeHyperParams::default();
        let a = train_probe(&x, &y, &hp).unwrap();
        let b = train_probe(&Matrix::from_rows(&rows), &y2, &hp).unwrap();
        assert!(a.weights.max_abs_diff(&b.weights) < 1e-12);
        assert!((a.bias[0] - b.bias[0]).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_training_error() {
        let x = Matrix::<f64>::zeros(3, 2);
        assert!(matches!(
            train_probe(&x, &[1, 1, 1], &ProbeHyperParams::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn zero_probe_is_uniform() {
        let p = LinearProbe::new(Matrix::<f64>::zeros(2, 4), vec![0.0, 0.0]).unwrap();
        assert_eq!(probe_predict(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.5, 0.5]);
        assert!(probe_predict(&p, &[1.0]).is_err());
    }

    #[test]
    fn flags_strictly_above_half() {
        assert_eq!(flag_tokens(&[0.4, 0.6, 0.5]), vec![false, true, false]);
    }

    #[test]
    fn min_layer_defaults() {
        assert_eq!(default_min_layer(32), 10);
        assert_eq!(default_min_layer(4), 2);
        assert_eq!(default_min_layer(5), 3);
    }

    #[test]
    fn class_direction_two_classes() {
        let p = LinearProbe::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]), vec![0.0, 0.0]).unwrap();
        assert_eq!(p.class_direction(0), vec![1.0, -2.0]);
    }

    #[test]
    fn probe_archive_round_trip() {
        let (x, y) = one_d(4);
        let p = train_probe(
            &x,
            &y,
            &ProbeHyperParams {
                steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let back = LinearProbe::<f64>::from_archive(&Archive::from_bytes(&p.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.weights, p.weights);
        assert_eq!(back.bias, p.bias);
        assert_eq!(back.training.unwrap().final_loss, p.training.unwrap().final_loss);
    }
}
