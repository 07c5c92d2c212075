//! Forward kernels of the GSA module, each expressed as a handful of contractions.
//!
//! Per-head tensors use the layout `[batch, height, width, head, channel]`.

use serde::{Deserialize, Serialize};

use super::config::{GsaConfig, KqvWeights, RelPosEmbedding};
use crate::tensor::{
    batch_norm, contract, pointwise_conv, softmax, BatchNormState, BnMode, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Column,
    Row,
}

/// Keys, queries and values split into heads. `k` is absent when no branch reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Kqv {
    pub k: Option<Tensor>,
    pub q: Tensor,
    pub v: Tensor,
}

pub(crate) fn split_heads(t: Tensor, heads: usize) -> Result<Tensor> {
    let s = t.shape().to_vec();
    let c = s[3];
    Ok(t.reshape(&[s[0], s[1], s[2], heads, c / heads])?)
}

pub(crate) fn merge_heads(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    Ok(t.reshape(&[s[0], s[1], s[2], s[3] * s[4]])?)
}

pub(crate) fn check_input(x: &Tensor, cfg: &GsaConfig) -> Result<()> {
    match x.shape() {
        &[_, h, w, d] if h == cfg.height && w == cfg.width && d == cfg.d_in => Ok(()),
        s => Err(Error::Config(format!(
            "input shape {s:?} does not match [b, {}, {}, {}]",
            cfg.height, cfg.width, cfg.d_in
        ))),
    }
}

/// Three 1x1 projections, each followed by its BN, reshaped into heads.
pub fn kqv_project(x: &Tensor, weights: &KqvWeights, cfg: &GsaConfig, mode: BnMode) -> Result<Kqv> {
    cfg.validate()?;
    check_input(x, cfg)?;
    let project = |w: &Tensor, bn: &BatchNormState| -> Result<Tensor> {
        let (y, _) = batch_norm(&pointwise_conv(x, w)?, bn, mode)?;
        split_heads(y, cfg.n_heads)
    };
    let k = if cfg.content {
        Some(project(&weights.w_k, &weights.bn_k)?)
    } else {
        None
    };
    Ok(Kqv {
        k,
        q: project(&weights.w_q, &weights.bn_q)?,
        v: project(&weights.w_v, &weights.bn_v)?,
    })
}

fn check_heads(k: &Tensor, q: &Tensor, v: &Tensor) -> Result<()> {
    let (ks, qs, vs) = (k.shape(), q.shape(), v.shape());
    if ks.len() != 5 || ks != qs || vs.len() != 5 || vs[..4] != ks[..4] {
        return Err(Error::Config(format!(
            "incompatible head tensors K{ks:?} Q{qs:?} V{vs:?}"
        )));
    }
    Ok(())
}

pub(crate) fn effective_queries(q: &Tensor, cfg: &GsaConfig) -> Result<Tensor> {
    if cfg.softmax_on_queries {
        Ok(softmax(q, &[4])?)
    } else {
        Ok(q.clone())
    }
}

/// Global content attention `Y = Q (softmax_pixels(K)^T V)` per head.
///
/// Keys are normalized over all pixels for each (head, key channel). Queries
/// are used raw unless `cfg.softmax_on_queries` is set. No `1/sqrt(d)` factor.
pub fn content_attention(k: &Tensor, q: &Tensor, v: &Tensor, cfg: &GsaConfig) -> Result<Tensor> {
    check_heads(k, q, v)?;
    let k_hat = softmax(k, &[1, 2])?;
    let context = contract("bxynk,bxynv->bnkv", &[&k_hat, v])?;
    Ok(contract(
        "bxynk,bnkv->bxynv",
        &[&effective_queries(q, cfg)?, &context],
    )?)
}

/// Content attention restricted to columns, then to rows. The row pass
/// aggregates the column pass output with the same keys and queries.
pub fn axial_content_attention(
    k: &Tensor,
    q: &Tensor,
    v: &Tensor,
    cfg: &GsaConfig,
) -> Result<Tensor> {
    check_heads(k, q, v)?;
    let q_eff = effective_queries(q, cfg)?;
    let k_col = softmax(k, &[1])?;
    let ctx_col = contract("bxynk,bxynv->bynkv", &[&k_col, v])?;
    let y_col = contract("bxynk,bynkv->bxynv", &[&q_eff, &ctx_col])?;
    let k_row = softmax(k, &[2])?;
    let ctx_row = contract("bxynk,bxynv->bxnkv", &[&k_row, &y_col])?;
    Ok(contract("bxynk,bxnkv->bxynv", &[&q_eff, &ctx_row])?)
}

/// `I[x, i, r] = 1` iff `r - (extent - 1) == i - x` and `|i - x| <= window`.
pub fn build_reindex_tensor(extent: usize, window: usize) -> Result<Tensor> {
    if extent == 0 || window == 0 {
        return Err(Error::Config(format!(
            "reindex tensor needs extent, window >= 1 (got {extent}, {window})"
        )));
    }
    let mut t = Tensor::zeros(&[extent, extent, 2 * extent - 1]);
    for x in 0..extent {
        for i in 0..extent {
            if x.abs_diff(i) <= window {
                t.set(&[x, i, i + extent - 1 - x], 1.0);
            }
        }
    }
    Ok(t)
}

/// Absolute-position embeddings `P[x, i, k] = I[x, i, r] R[r, k]`.
pub(crate) fn absolute_embeddings(r: &Tensor, extent: usize, window: usize) -> Result<Tensor> {
    if r.rank() != 2 || r.shape()[0] != 2 * extent - 1 {
        return Err(Error::Config(format!(
            "embedding of shape {:?} does not cover {} relative shifts",
            r.shape(),
            2 * extent - 1
        )));
    }
    let reindex = build_reindex_tensor(extent, window)?;
    Ok(contract("xir,rk->xik", &[&reindex, r])?)
}

pub(crate) const fn axis_specs(axis: Axis) -> (&'static str, &'static str) {
    match axis {
        Axis::Column => ("bxynk,xik->bxyin", "bxyin,biynv->bxynv"),
        Axis::Row => ("bxynk,yik->bxyin", "bxyin,bxinv->bxynv"),
    }
}

/// One axial positional pass: `S = Q P`, `Y = S V` with no softmax.
///
/// Pixel pairs farther apart than `cfg.window` along `axis` get zero weight.
pub fn positional_attention_axis(
    q: &Tensor,
    v: &Tensor,
    r: &Tensor,
    axis: Axis,
    cfg: &GsaConfig,
) -> Result<Tensor> {
    let extent = match axis {
        Axis::Column => q.shape()[1],
        Axis::Row => q.shape()[2],
    };
    let p = absolute_embeddings(r, extent, cfg.window)?;
    let (score_spec, out_spec) = axis_specs(axis);
    let scores = contract(score_spec, &[q, &p])?;
    Ok(contract(out_spec, &[&scores, v])?)
}

/// Column pass, BN, row pass. The row pass keeps the original queries and
/// takes the normalized column output as its values. With a single axis
/// enabled its output is returned directly, without the middle BN.
pub fn positional_attention(
    q: &Tensor,
    v: &Tensor,
    emb: &RelPosEmbedding,
    bn_mid: &BatchNormState,
    cfg: &GsaConfig,
    mode: BnMode,
) -> Result<Tensor> {
    match (cfg.column, cfg.row) {
        (true, true) => {
            let y_col = positional_attention_axis(q, v, &emb.r_col, Axis::Column, cfg)?;
            let (normed, _) = batch_norm(&merge_heads(y_col)?, bn_mid, mode)?;
            positional_attention_axis(
                q,
                &split_heads(normed, cfg.n_heads)?,
                &emb.r_row,
                Axis::Row,
                cfg,
            )
        }
        (true, false) => positional_attention_axis(q, v, &emb.r_col, Axis::Column, cfg),
        (false, true) => positional_attention_axis(q, v, &emb.r_row, Axis::Row, cfg),
        (false, false) => Err(Error::Config(
            "positional attention with both axes disabled".into(),
        )),
    }
}
