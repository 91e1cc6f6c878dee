//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the engine's numeric code.
#![allow(dead_code, clippy::needless_range_loop)]

use dfp::model_io::{generate_random_model, MlpWeights, ModelConfig, WeightSet, BOS_ID};
use dfp::Scalar;

pub fn fixture<T: Scalar>() -> WeightSet<T> {
    generate_random_model(&ModelConfig::fixture(), 42).unwrap()
}

/// Independent SplitMix64 for prompt generation.
pub struct Mix(pub u64);

impl Mix {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

/// BOS followed by `n - 1` random non-BOS ids.
pub fn prompt(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut r = Mix(seed);
    let mut t = vec![BOS_ID];
    t.extend((1..n).map(|_| 1 + r.below(vocab - 1)));
    t
}

type Rows = Vec<Vec<f64>>;

fn mat<T: Scalar>(m: &dfp::Matrix<T>) -> Rows {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn norm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

/// `x · W` with W given as rows (W is in × out).
fn right(x: &[f64], w: &Rows) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// `W · x` with W rows as outputs.
fn left(w: &Rows, x: &[f64]) -> Vec<f64> {
    w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rope(v: &mut [f64], pos: usize, heads: usize, dh: usize, theta: f64) {
    for h in 0..heads {
        for j in 0..dh / 2 {
            let ang = pos as f64 / theta.powf(2.0 * j as f64 / dh as f64);
            let (a, b) = (v[h * dh + j], v[h * dh + j + dh / 2]);
            v[h * dh + j] = a * ang.cos() - b * ang.sin();
            v[h * dh + j + dh / 2] = a * ang.sin() + b * ang.cos();
        }
    }
}

pub struct NaiveTrace {
    /// Residual stream after each layer.
    pub hidden: Vec<Rows>,
    pub logits: Rows,
}

/// Textbook forward pass on nested vectors, independent of the engine.
pub fn naive_forward<T: Scalar>(ws: &WeightSet<T>, tokens: &[usize]) -> NaiveTrace {
    let c = ws.config();
    let (d, hn, kvh) = (c.d_model, c.num_heads, c.num_kv_heads);
    let dh = d / hn;
    let gsz = hn / kvh;
    let emb = mat(&ws.token_embeddings);
    let mut x: Rows = tokens.iter().map(|&t| emb[t].clone()).collect();
    let n = x.len();
    let mut hidden = Vec::new();
    for lw in ws.layers() {
        let g1: Vec<f64> = lw.attn_norm.iter().map(|v| v.as_f64()).collect();
        let (wq, wk, wv, wo) = (mat(&lw.wq), mat(&lw.wk), mat(&lw.wv), mat(&lw.wo));
        let xn: Rows = x.iter().map(|r| norm(r, &g1, c.norm_eps)).collect();
        let mut q: Rows = xn.iter().map(|r| right(r, &wq)).collect();
        let mut k: Rows = xn.iter().map(|r| right(r, &wk)).collect();
        let v: Rows = xn.iter().map(|r| right(r, &wv)).collect();
        if c.rope {
            for i in 0..n {
                rope(&mut q[i], i, hn, dh, c.rope_theta);
                rope(&mut k[i], i, kvh, dh, c.rope_theta);
            }
        }
        let mut z = vec![vec![0.0; d]; n];
        for h in 0..hn {
            let g = h / gsz;
            for i in 0..n {
                let mut s: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|e| q[i][h * dh + e] * k[j][g * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|v| *v = (*v - m).exp());
                let tot: f64 = s.iter().sum();
                for j in 0..=i {
                    for e in 0..dh {
                        z[i][h * dh + e] += s[j] / tot * v[j][g * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            let o = right(&z[i], &wo);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        let g2: Vec<f64> = lw.mlp_norm.iter().map(|v| v.as_f64()).collect();
        let act = |p: f64| match c.activation {
            dfp::model_io::Activation::Gelu => gelu(p),
            dfp::model_io::Activation::Silu => silu(p),
        };
        for i in 0..n {
            let xm = norm(&x[i], &g2, c.norm_eps);
            let (m, down) = match &lw.mlp {
                MlpWeights::Plain { w_up, w_down } => (
                    left(&mat(w_up), &xm).into_iter().map(act).collect::<Vec<_>>(),
                    mat(w_down),
                ),
                MlpWeights::Gated { w_gate, w_up, w_down } => {
                    let g = left(&mat(w_gate), &xm);
                    let u = left(&mat(w_up), &xm);
                    (g.into_iter().zip(u).map(|(a, b)| act(a) * b).collect(), mat(w_down))
                }
            };
            let o = left(&down, &m);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        hidden.push(x.clone());
    }
    let gf: Vec<f64> = ws.final_norm.iter().map(|v| v.as_f64()).collect();
    let head = mat(&ws.lm_head);
    let logits = x.iter().map(|r| left(&head, &norm(r, &gf, c.norm_eps))).collect();
    NaiveTrace { hidden, logits }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn to_rows<T: Scalar>(m: &dfp::Matrix<T>) -> Rows {
    mat(m)
}
