//! Shared oracles for the integration tests: naive loop implementations of
//! windowed attention, kept independent of the tape code paths they check.
#![allow(dead_code)] // each test target uses a different subset

use omniview::attention::{FuseParams, MdaParams, WsaParams};
use omniview::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn wsa_params(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> WsaParams<f64> {
    WsaParams {
        wq: rand_tensor(rng, vec![c, c], 0.5),
        wk: rand_tensor(rng, vec![c, c], 0.5),
        wv: rand_tensor(rng, vec![c, c], 0.5),
        wo: rand_tensor(rng, vec![c, c], 0.5),
        heads,
        rel_bias: None,
    }
}

pub fn mda_params(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    fuse: FuseParams<f64>,
) -> MdaParams<f64> {
    MdaParams {
        core: wsa_params(rng, c, heads),
        fuse,
    }
}

/// `out = x @ w` for row-major `x: [rows, k]`, `w: [k, n]`.
fn matmul2(x: &[f64], w: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += x[r * k + kk] * w[kk * n + j];
            }
            out[r * n + j] = acc;
        }
    }
    out
}

/// Naive multi-head attention inside one window with per-pair allowed sets:
/// blocked pairs are excluded from the softmax outright (hard restriction,
/// not an additive mask). `allowed[i * n + j]` says whether token `i` may
/// attend to token `j`.
#[allow(clippy::too_many_arguments)]
fn naive_window(
    q_tokens: &[f64],
    k_tokens: &[f64],
    v_tokens: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    p: &WsaParams<f64>,
    allowed: &[bool],
) -> Vec<f64> {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = matmul2(q_tokens, p.wq.data(), n, c, c);
    let k = matmul2(k_tokens, p.wk.data(), n, c, c);
    let v = matmul2(v_tokens, p.wv.data(), n, c, c);
    let mut ctx = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut weights = vec![0.0; n];
            let mut denom = 0.0;
            for j in 0..n {
                if !allowed[i * n + j] {
                    continue;
                }
                let mut score = 0.0;
                for dd in 0..d {
                    score += q[i * c + h * d + dd] * k[j * c + h * d + dd];
                }
                let e = (score * scale).exp();
                weights[j] = e;
                denom += e;
            }
            for j in 0..n {
                if weights[j] == 0.0 {
                    continue;
                }
                let a = weights[j] / denom;
                for dd in 0..d {
                    ctx[i * c + h * d + dd] += a * v[j * c + h * d + dd];
                }
            }
        }
    }
    matmul2(&ctx, p.wo.data(), n, c, c)
}

/// Naive single-view windowed self-attention over a `[B, H, W, C]` grid:
/// partition into `m x m` windows, full attention within each window.
pub fn naive_windowed_self_attention(x: &Tensor<f64>, m: usize, p: &WsaParams<f64>) -> Vec<f64> {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = m * m;
    let all = vec![true; n * n];
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for wi in 0..h / m {
            for wj in 0..w / m {
                let mut tokens = vec![0.0; n * c];
                for ti in 0..m {
                    for tj in 0..m {
                        let src = ((bi * h + wi * m + ti) * w + wj * m + tj) * c;
                        tokens[(ti * m + tj) * c..(ti * m + tj + 1) * c]
                            .copy_from_slice(&x.data()[src..src + c]);
                    }
                }
                let res = naive_window(&tokens, &tokens, &tokens, n, c, p.heads, p, &all);
                for ti in 0..m {
                    for tj in 0..m {
                        let dst = ((bi * h + wi * m + ti) * w + wj * m + tj) * c;
                        out[dst..dst + c]
                            .copy_from_slice(&res[(ti * m + tj) * c..(ti * m + tj + 1) * c]);
                    }
                }
            }
        }
    }
    out
}

/// Brute-force shifted-window self-attention: tokens are grouped by
/// (shifted window, pre-shift region) and each group attends only within
/// itself, computed entirely in original-grid coordinates. This is the
/// region-labeling oracle the shifted path must reproduce.
pub fn region_restricted_attention(
    x: &Tensor<f64>,
    m: usize,
    d: usize,
    p: &WsaParams<f64>,
) -> Vec<f64> {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    // pre-shift region bands: rows [0, d), [d, h - m + d), [h - m + d, h)
    let band = |v: usize, len: usize| {
        if v < d {
            0
        } else if v < len - m + d {
            1
        } else {
            2
        }
    };
    // group key of an original coordinate: shifted window plus region label
    let group = |i: usize, j: usize| {
        let (si, sj) = ((i + h - d) % h, (j + w - d) % w);
        let win = (si / m) * (w / m) + sj / m;
        (win, band(i, h) * 3 + band(j, w))
    };
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        // enumerate groups by scanning all coordinates
        type Group = ((usize, usize), Vec<(usize, usize)>);
        let mut seen: Vec<Group> = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let g = group(i, j);
                match seen.iter_mut().find(|(key, _)| *key == g) {
                    Some((_, members)) => members.push((i, j)),
                    None => seen.push((g, vec![(i, j)])),
                }
            }
        }
        for (_, members) in &seen {
            let k = members.len();
            let mut tokens = vec![0.0; k * c];
            for (t, &(i, j)) in members.iter().enumerate() {
                let src = ((bi * h + i) * w + j) * c;
                tokens[t * c..(t + 1) * c].copy_from_slice(&x.data()[src..src + c]);
            }
            let all = vec![true; k * k];
            let res = naive_window(&tokens, &tokens, &tokens, k, c, p.heads, p, &all);
            for (t, &(i, j)) in members.iter().enumerate() {
                let dst = ((bi * h + i) * w + j) * c;
                out[dst..dst + c].copy_from_slice(&res[t * c..(t + 1) * c]);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
