//! Deliberately naive reference implementations, written loop by loop and
//! independent of the library kernels.

#![allow(dead_code)]

use botkit::attention::{MhsaParams, PosParams};
use botkit::Tensor;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Direct convolution, zero padding.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (y, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, ic, y as usize, xx as usize]) * w.at(&[oc, ic, di, dj]);
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (vec![n, o, ho, wo], out)
}

pub fn batchnorm(x: &Tensor<f64>, g: &[f64], b: &[f64], m: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    let [_, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &val)| {
            let ch = (i / (h * w)) % c;
            (val - m[ch]) / (v[ch] + eps).sqrt() * g[ch] + b[ch]
        })
        .collect()
}

pub fn global_avg_pool(x: &Tensor<f64>) -> Vec<f64> {
    let hw = x.shape()[2] * x.shape()[3];
    x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| (v - m).exp() / z).collect()
}

/// q·(r_h[Δy] + r_w[Δx]) for every (query, key) pair, Δ = key − query.
pub fn rel_logits(q: &Tensor<f64>, r_h: &Tensor<f64>, r_w: &Tensor<f64>, h: usize, w: usize) -> Vec<f64> {
    let (batch, n, d) = (q.shape()[0], h * w, q.shape()[2]);
    let mut out = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        for qpos in 0..n {
            for kpos in 0..n {
                let dy = (kpos / w) as isize - (qpos / w) as isize;
                let dx = (kpos % w) as isize - (qpos % w) as isize;
                let (iy, ix) = ((dy + h as isize - 1) as usize, (dx + w as isize - 1) as usize);
                out.push((0..d).map(|c| q.at(&[b, qpos, c]) * (r_h.at(&[iy, c]) + r_w.at(&[ix, c]))).sum());
            }
        }
    }
    out
}

/// Per-head attention computed one output scalar at a time.
pub fn mhsa(x: &Tensor<f64>, p: &MhsaParams<Tensor<f64>>, heads: usize) -> Vec<f64> {
    let [nb, d, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (n, dh) = (h * w, d / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let lin = |m: &Tensor<f64>, b: usize, pos: usize, o: usize| -> f64 {
        (0..d).map(|c| m.at(&[o, c]) * x.at(&[b, c, pos / w, pos % w])).sum()
    };
    let mut out = vec![0.0; nb * d * n];
    for b in 0..nb {
        for hd in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|c| {
                                let ch = hd * dh + c;
                                let pos = match &p.pos {
                                    PosParams::Relative(t) => {
                                        let dy = (j / w + h - 1) - i / w;
                                        let dx = (j % w + w - 1) - i % w;
                                        t.r_h.at(&[dy, c]) + t.r_w.at(&[dx, c])
                                    }
                                    PosParams::Absolute(a) => a.at(&[j, c]),
                                    PosParams::None => 0.0,
                                };
                                scale * lin(&p.wq, b, i, ch) * (lin(&p.wk, b, j, ch) + pos)
                            })
                            .sum()
                    })
                    .collect();
                let a = softmax(&logits);
                for c in 0..dh {
                    let ch = hd * dh + c;
                    out[(b * d + ch) * n + i] = (0..n).map(|j| a[j] * lin(&p.wv, b, j, ch)).sum();
                }
            }
        }
    }
    out
}

/// Moves spatial position `perm[p]` to position `p` in every channel.
pub fn permute_positions(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let hw = x.shape()[2] * x.shape()[3];
    let data = x.data().chunks(hw).flat_map(|ch| perm.iter().map(move |&p| ch[p])).collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
