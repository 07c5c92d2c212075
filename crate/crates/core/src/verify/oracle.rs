//! Brute-force reference implementations written as explicit loops.
//!
//! Nothing here calls the contraction engine or the tensor ops; tensors are
//! used only as storage. Batch norm is always applied in inference form.

use crate::attention::{GsaConfig, GsaParams};
use crate::tensor::{BatchNormState, Tensor};

/// Row-major offset into a rank-5 `[b, x, y, n, c]` buffer.
#[inline]
fn at5(s: &[usize], b: usize, x: usize, y: usize, n: usize, c: usize) -> usize {
    (((b * s[1] + x) * s[2] + y) * s[3] + n) * s[4] + c
}

fn softmax_vec(vals: &[f64]) -> Vec<f64> {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the last axis of a rank-5 tensor, by loops.
fn query_softmax(q: &Tensor) -> Tensor {
    let kc = q.shape()[4];
    let mut out = q.clone();
    for chunk in out.data_mut().chunks_mut(kc) {
        let sm = softmax_vec(chunk);
        chunk.copy_from_slice(&sm);
    }
    out
}

/// `f_j = sum_k q_jk * sum_i softmax_i(K_ik) v_i`, materializing the full
/// pixel-to-pixel weight `w_ji = sum_k q_jk softmax_i(K_ik)` (quadratic in pixels).
pub fn oracle_content_attention(
    k: &Tensor,
    q: &Tensor,
    v: &Tensor,
    softmax_on_queries: bool,
) -> Tensor {
    let (ks, vs) = (k.shape().to_vec(), v.shape().to_vec());
    let (nb, h, w, nh, kc, vc) = (ks[0], ks[1], ks[2], ks[3], ks[4], vs[4]);
    let q = if softmax_on_queries {
        query_softmax(q)
    } else {
        q.clone()
    };
    let npx = h * w;
    let mut out = Tensor::zeros(&vs);
    for b in 0..nb {
        for n in 0..nh {
            // softmax of each key channel over all pixels
            let mut k_hat = vec![0.0; npx * kc];
            for c in 0..kc {
                let col: Vec<f64> = (0..npx)
                    .map(|p| k.data()[at5(&ks, b, p / w, p % w, n, c)])
                    .collect();
                for (p, s) in softmax_vec(&col).into_iter().enumerate() {
                    k_hat[p * kc + c] = s;
                }
            }
            for j in 0..npx {
                let weights: Vec<f64> = (0..npx)
                    .map(|i| {
                        (0..kc)
                            .map(|c| q.data()[at5(&ks, b, j / w, j % w, n, c)] * k_hat[i * kc + c])
                            .sum()
                    })
                    .collect();
                for cv in 0..vc {
                    let mut acc = 0.0;
                    for (i, wt) in weights.iter().enumerate() {
                        acc += wt * v.data()[at5(&vs, b, i / w, i % w, n, cv)];
                    }
                    out.data_mut()[at5(&vs, b, j / w, j % w, n, cv)] = acc;
                }
            }
        }
    }
    out
}

/// Content attention within one line (column or row) of pixels, by loops.
fn line_content(k: &Tensor, q: &Tensor, v: &Tensor, along_column: bool) -> Tensor {
    let (ks, vs) = (k.shape().to_vec(), v.shape().to_vec());
    let (nb, h, w, nh, kc, vc) = (ks[0], ks[1], ks[2], ks[3], ks[4], vs[4]);
    let (lines, len) = if along_column { (w, h) } else { (h, w) };
    let pos = |line: usize, t: usize| if along_column { (t, line) } else { (line, t) };
    let mut out = Tensor::zeros(&vs);
    for b in 0..nb {
        for n in 0..nh {
            for line in 0..lines {
                let mut k_hat = vec![0.0; len * kc];
                for c in 0..kc {
                    let vals: Vec<f64> = (0..len)
                        .map(|t| {
                            let (x, y) = pos(line, t);
                            k.data()[at5(&ks, b, x, y, n, c)]
                        })
                        .collect();
                    for (t, s) in softmax_vec(&vals).into_iter().enumerate() {
                        k_hat[t * kc + c] = s;
                    }
                }
                for j in 0..len {
                    let (xj, yj) = pos(line, j);
                    for cv in 0..vc {
                        let mut acc = 0.0;
                        for i in 0..len {
                            let (xi, yi) = pos(line, i);
                            let wt: f64 = (0..kc)
                                .map(|c| q.data()[at5(&ks, b, xj, yj, n, c)] * k_hat[i * kc + c])
                                .sum();
                            acc += wt * v.data()[at5(&vs, b, xi, yi, n, cv)];
                        }
                        out.data_mut()[at5(&vs, b, xj, yj, n, cv)] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Column-only content attention followed by row-only content attention.
pub fn oracle_axial_content_attention(
    k: &Tensor,
    q: &Tensor,
    v: &Tensor,
    softmax_on_queries: bool,
) -> Tensor {
    let q = if softmax_on_queries {
        query_softmax(q)
    } else {
        q.clone()
    };
    let col = line_content(k, &q, v, true);
    line_content(k, &q, &col, false)
}

/// One axial positional pass: `f_ab = sum_{|d| <= window} (q_ab . r_d) v_{a+d, b}`
/// (or along the row), where `r_d` is row `d + extent - 1` of the embedding.
pub fn oracle_positional_axis(
    q: &Tensor,
    v: &Tensor,
    r: &Tensor,
    along_column: bool,
    window: usize,
) -> Tensor {
    let (qs, vs) = (q.shape().to_vec(), v.shape().to_vec());
    let (nb, h, w, nh, kc, vc) = (qs[0], qs[1], qs[2], qs[3], qs[4], vs[4]);
    let extent = if along_column { h } else { w };
    let window = window as i64;
    let mut out = Tensor::zeros(&vs);
    for b in 0..nb {
        for x in 0..h {
            for y in 0..w {
                let own = if along_column { x } else { y } as i64;
                for n in 0..nh {
                    for d in -window..=window {
                        let other = own + d;
                        if other < 0 || other >= extent as i64 {
                            continue;
                        }
                        let row = (d + extent as i64 - 1) as usize;
                        let weight: f64 = (0..kc)
                            .map(|c| q.data()[at5(&qs, b, x, y, n, c)] * r.data()[row * kc + c])
                            .sum();
                        let (xo, yo) = if along_column {
                            (other as usize, y)
                        } else {
                            (x, other as usize)
                        };
                        for cv in 0..vc {
                            out.data_mut()[at5(&vs, b, x, y, n, cv)] +=
                                weight * v.data()[at5(&vs, b, xo, yo, n, cv)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inference-form batch norm on any tensor whose last axis is the channel axis
/// (or, for rank-5 head tensors, whose last two axes together form the channels).
pub fn oracle_bn_infer(t: &Tensor, bn: &BatchNormState) -> Tensor {
    let c = bn.gamma.numel();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = bn.gamma.data()[ch] * (*v - bn.running_mean.data()[ch])
            / (bn.running_var.data()[ch] + bn.epsilon).sqrt()
            + bn.beta.data()[ch];
    }
    out
}

/// Column pass, BN, row pass (or a single pass when only one axis is enabled).
pub fn oracle_positional_attention(
    q: &Tensor,
    v: &Tensor,
    params: &GsaParams,
    cfg: &GsaConfig,
) -> Tensor {
    match (cfg.column, cfg.row) {
        (true, true) => {
            let col = oracle_positional_axis(q, v, &params.emb.r_col, true, cfg.window);
            let mid = oracle_bn_infer(&col, &params.bn_mid);
            oracle_positional_axis(q, &mid, &params.emb.r_row, false, cfg.window)
        }
        (true, false) => oracle_positional_axis(q, v, &params.emb.r_col, true, cfg.window),
        (false, true) => oracle_positional_axis(q, v, &params.emb.r_row, false, cfg.window),
        (false, false) => Tensor::zeros(v.shape()),
    }
}

/// 1x1 projection, BN, split into heads: `[b, h, w, d_in] -> [b, h, w, heads, d/heads]`.
pub fn oracle_projection(x: &Tensor, w: &Tensor, bn: &BatchNormState, heads: usize) -> Tensor {
    let xs = x.shape();
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let pixels = x.numel() / d_in;
    let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2], heads, d_out / heads]);
    for p in 0..pixels {
        for e in 0..d_out {
            let mut acc = 0.0;
            for d in 0..d_in {
                acc += x.data()[p * d_in + d] * w.data()[d * d_out + e];
            }
            out.data_mut()[p * d_out + e] = acc;
        }
    }
    oracle_bn_infer(&out, bn)
}

/// Full GSA module in inference mode, composed from the oracles above.
/// Returns `[b, h, w, d_out]`.
pub fn oracle_gsa_forward(x: &Tensor, params: &GsaParams, cfg: &GsaConfig) -> Tensor {
    let q = oracle_projection(x, &params.kqv.w_q, &params.kqv.bn_q, cfg.n_heads);
    let v = oracle_projection(x, &params.kqv.w_v, &params.kqv.bn_v, cfg.n_heads);
    let mut total = Tensor::zeros(v.shape());
    if cfg.content {
        let k = oracle_projection(x, &params.kqv.w_k, &params.kqv.bn_k, cfg.n_heads);
        let c = if cfg.axial_content {
            oracle_axial_content_attention(&k, &q, &v, cfg.softmax_on_queries)
        } else {
            oracle_content_attention(&k, &q, &v, cfg.softmax_on_queries)
        };
        for (t, c) in total.data_mut().iter_mut().zip(c.data()) {
            *t += c;
        }
    }
    if cfg.column || cfg.row {
        let p = oracle_positional_attention(&q, &v, params, cfg);
        for (t, p) in total.data_mut().iter_mut().zip(p.data()) {
            *t += p;
        }
    }
    let s = total.shape().to_vec();
    let merged = Tensor::new(vec![s[0], s[1], s[2], s[3] * s[4]], total.into_data())
        .expect("same element count");
    oracle_bn_infer(&merged, &params.bn_out)
}
