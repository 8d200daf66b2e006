//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use mvrecon::aggregator::ModelConfig;
use mvrecon::params::ParamStore;
use mvrecon::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor<f64>) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(name).unwrap().value.clone()
}

fn linear(x: &Rows, w: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| b.get(0, j) + (0..w.rows()).map(|k| row[k] * w.get(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, g: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g.get(0, j) + b.get(0, j))
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Dense pre-norm attention + MLP block; `keys[i]` lists the rows query `i`
/// may attend to.
pub fn block(
    x: &Rows,
    store: &ParamStore<f64>,
    prefix: &str,
    heads: usize,
    keys: &[Vec<usize>],
) -> Rows {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    let c = x[0].len();
    let dh = c / heads;
    let h = layer_norm(x, &p("ln1.g"), &p("ln1.b"));
    let qkv = linear(&h, &p("qkv.w"), &p("qkv.b"));
    let scale = p("qk_scale").get(0, 0);
    let mut attn = vec![vec![0.0; c]; x.len()];
    for head in 0..heads {
        let q: Rows = qkv
            .iter()
            .map(|r| {
                unit(&r[head * dh..(head + 1) * dh])
                    .iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect();
        let k: Rows = qkv
            .iter()
            .map(|r| unit(&r[c + head * dh..c + (head + 1) * dh]))
            .collect();
        let v: Rows = qkv
            .iter()
            .map(|r| r[2 * c + head * dh..2 * c + (head + 1) * dh].to_vec())
            .collect();
        for (i, allowed) in keys.iter().enumerate() {
            let s: Vec<f64> = allowed
                .iter()
                .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(allowed) {
                for d in 0..dh {
                    attn[i][head * dh + d] += w / z * v[j][d];
                }
            }
        }
    }
    let proj = linear(&attn, &p("proj.w"), &p("proj.b"));
    let x1: Rows = x
        .iter()
        .zip(&proj)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let h = layer_norm(&x1, &p("ln2.g"), &p("ln2.b"));
    let h: Rows = linear(&h, &p("fc1.w"), &p("fc1.b"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let h = linear(&h, &p("fc2.w"), &p("fc2.b"));
    x1.iter()
        .zip(&h)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect()
}

/// Key lists for attention within consecutive groups of `stride` rows.
pub fn per_group_keys(total: usize, stride: usize) -> Vec<Vec<usize>> {
    (0..total)
        .map(|i| ((i / stride) * stride..(i / stride + 1) * stride).collect())
        .collect()
}

pub fn all_keys(total: usize) -> Vec<Vec<usize>> {
    (0..total).map(|_| (0..total).collect()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Small config used across tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        hidden_dim: 16,
        num_heads: 2,
        patch_size: 4,
        num_registers: 4,
        register_attention_ratio: 0.5,
        height: 8,
        width: 12,
        mlp_ratio: 4,
        depth_upsample: 4,
        depth_channels: 8,
        camera_blocks: 2,
    }
}
