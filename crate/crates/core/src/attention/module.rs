//! Full GSA module: projections, parallel content and positional branches,
//! head merge and output BN, with a recorded forward pass for backprop.

use super::config::{GsaConfig, GsaParams};
use super::kernels::{
    absolute_embeddings, axis_specs, check_input, effective_queries, merge_heads, split_heads, Axis,
};
use crate::tensor::{
    batch_norm_backward, batch_norm_cached, contract, pointwise_conv, softmax, softmax_backward,
    BatchNormState, BnCache, BnMode, Tensor,
};
use crate::{Error, Result};

struct Projection {
    out: Tensor,
    cache: BnCache,
    state: BatchNormState,
}

fn project(
    x: &Tensor,
    w: &Tensor,
    bn: &BatchNormState,
    heads: usize,
    mode: BnMode,
) -> Result<Projection> {
    let (y, state, cache) = batch_norm_cached(&pointwise_conv(x, w)?, bn, mode)?;
    Ok(Projection {
        out: split_heads(y, heads)?,
        cache,
        state,
    })
}

enum ContentTape {
    Global {
        k_hat: Tensor,
        context: Tensor,
    },
    Axial {
        k_col: Tensor,
        ctx_col: Tensor,
        y_col: Tensor,
        k_row: Tensor,
        ctx_row: Tensor,
    },
}

struct AxisTape {
    p: Tensor,
    scores: Tensor,
    values: Tensor,
}

/// Intermediates of one forward pass.
pub struct GsaTape {
    x: Tensor,
    k: Option<Projection>,
    q: Projection,
    v: Projection,
    q_eff: Tensor,
    content: Option<ContentTape>,
    col: Option<AxisTape>,
    mid: Option<BnCache>,
    row: Option<AxisTape>,
    out_cache: BnCache,
    /// Pre-BN content branch output, merged heads.
    pub content_out: Option<Tensor>,
    /// Pre-BN positional branch output, merged heads.
    pub positional_out: Option<Tensor>,
}

/// Output of [`gsa_forward_recorded`].
pub struct GsaPass {
    pub output: Tensor,
    pub tape: GsaTape,
    /// BN states after the pass; equal to the inputs in infer mode.
    pub bn_states: GsaBnStates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsaBnStates {
    pub bn_k: Option<BatchNormState>,
    pub bn_q: BatchNormState,
    pub bn_v: BatchNormState,
    pub bn_mid: Option<BatchNormState>,
    pub bn_out: BatchNormState,
}

impl GsaParams {
    /// Copies running statistics produced by a train-mode pass.
    pub fn absorb_running_stats(&mut self, states: &GsaBnStates) {
        let copy = |dst: &mut BatchNormState, src: &BatchNormState| {
            dst.running_mean = src.running_mean.clone();
            dst.running_var = src.running_var.clone();
        };
        if let Some(s) = &states.bn_k {
            copy(&mut self.kqv.bn_k, s);
        }
        copy(&mut self.kqv.bn_q, &states.bn_q);
        copy(&mut self.kqv.bn_v, &states.bn_v);
        if let Some(s) = &states.bn_mid {
            copy(&mut self.bn_mid, s);
        }
        copy(&mut self.bn_out, &states.bn_out);
    }
}

fn axis_forward(
    q: &Tensor,
    v: &Tensor,
    r: &Tensor,
    axis: Axis,
    cfg: &GsaConfig,
) -> Result<(Tensor, AxisTape)> {
    let extent = match axis {
        Axis::Column => cfg.height,
        Axis::Row => cfg.width,
    };
    let p = absolute_embeddings(r, extent, cfg.window)?;
    let (score_spec, out_spec) = axis_specs(axis);
    let scores = contract(score_spec, &[q, &p])?;
    let out = contract(out_spec, &[&scores, v])?;
    Ok((
        out,
        AxisTape {
            p,
            scores,
            values: v.clone(),
        },
    ))
}

/// Forward pass of the GSA module.
pub fn gsa_forward(
    x: &Tensor,
    params: &GsaParams,
    cfg: &GsaConfig,
    mode: BnMode,
) -> Result<Tensor> {
    Ok(gsa_forward_recorded(x, params, cfg, mode)?.output)
}

/// Forward pass that keeps every intermediate needed by [`gsa_backward`].
pub fn gsa_forward_recorded(
    x: &Tensor,
    params: &GsaParams,
    cfg: &GsaConfig,
    mode: BnMode,
) -> Result<GsaPass> {
    cfg.validate()?;
    check_input(x, cfg)?;
    params.check_shapes(cfg)?;
    let heads = cfg.n_heads;
    let kqv = &params.kqv;

    let k = if cfg.content {
        Some(project(x, &kqv.w_k, &kqv.bn_k, heads, mode)?)
    } else {
        None
    };
    let q = project(x, &kqv.w_q, &kqv.bn_q, heads, mode)?;
    let v = project(x, &kqv.w_v, &kqv.bn_v, heads, mode)?;
    let q_eff = effective_queries(&q.out, cfg)?;

    let mut content = None;
    let mut content_out = None;
    if let Some(k) = &k {
        let (y, tape) = if cfg.axial_content {
            let k_col = softmax(&k.out, &[1])?;
            let ctx_col = contract("bxynk,bxynv->bynkv", &[&k_col, &v.out])?;
            let y_col = contract("bxynk,bynkv->bxynv", &[&q_eff, &ctx_col])?;
            let k_row = softmax(&k.out, &[2])?;
            let ctx_row = contract("bxynk,bxynv->bxnkv", &[&k_row, &y_col])?;
            let y = contract("bxynk,bxnkv->bxynv", &[&q_eff, &ctx_row])?;
            (
                y,
                ContentTape::Axial {
                    k_col,
                    ctx_col,
                    y_col,
                    k_row,
                    ctx_row,
                },
            )
        } else {
            let k_hat = softmax(&k.out, &[1, 2])?;
            let context = contract("bxynk,bxynv->bnkv", &[&k_hat, &v.out])?;
            let y = contract("bxynk,bnkv->bxynv", &[&q_eff, &context])?;
            (y, ContentTape::Global { k_hat, context })
        };
        content = Some(tape);
        content_out = Some(merge_heads(y)?);
    }

    let (mut col, mut mid, mut row, mut bn_mid_state) = (None, None, None, None);
    let mut positional_out = None;
    if cfg.positional() {
        let mut values = v.out.clone();
        let mut y = None;
        if cfg.column {
            let (yc, tape) = axis_forward(&q.out, &values, &params.emb.r_col, Axis::Column, cfg)?;
            col = Some(tape);
            y = Some(yc);
        }
        if cfg.row {
            if let Some(yc) = y.take() {
                let (normed, state, cache) =
                    batch_norm_cached(&merge_heads(yc)?, &params.bn_mid, mode)?;
                mid = Some(cache);
                bn_mid_state = Some(state);
                values = split_heads(normed, heads)?;
            }
            let (yr, tape) = axis_forward(&q.out, &values, &params.emb.r_row, Axis::Row, cfg)?;
            row = Some(tape);
            y = Some(yr);
        }
        positional_out = Some(merge_heads(y.expect("an axis is enabled"))?);
    }

    let summed = match (&content_out, &positional_out) {
        (Some(c), Some(p)) => c.add(p)?,
        (Some(c), None) => c.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("no branch enabled".into())),
    };
    let (output, out_state, out_cache) = batch_norm_cached(&summed, &params.bn_out, mode)?;

    let bn_states = GsaBnStates {
        bn_k: k.as_ref().map(|p| p.state.clone()),
        bn_q: q.state.clone(),
        bn_v: v.state.clone(),
        bn_mid: bn_mid_state,
        bn_out: out_state,
    };
    let tape = GsaTape {
        x: x.clone(),
        k,
        q,
        v,
        q_eff,
        content,
        col,
        mid,
        row,
        out_cache,
        content_out,
        positional_out,
    };
    Ok(GsaPass {
        output,
        tape,
        bn_states,
    })
}

/// Gradients of a scalar loss with respect to the module input and every learnable tensor.
/// Tensors the configured forward does not read get exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GsaGrads {
    pub x: Tensor,
    pub params: GsaParams,
}

impl GsaGrads {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("x", &self.x)];
        v.extend(self.params.named());
        v
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Backward pass for one axial positional pass; returns `(dQ, dV, dR)`.
fn axis_backward(
    tape: &AxisTape,
    q: &Tensor,
    dy: &Tensor,
    axis: Axis,
    cfg: &GsaConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d_scores, d_values, d_q, d_p) = match axis {
        Axis::Column => (
            contract("bxynv,biynv->bxyin", &[dy, &tape.values])?,
            contract("bxyin,bxynv->biynv", &[&tape.scores, dy])?,
            "bxyin,xik->bxynk",
            "bxynk,bxyin->xik",
        ),
        Axis::Row => (
            contract("bxynv,bxinv->bxyin", &[dy, &tape.values])?,
            contract("bxyin,bxynv->bxinv", &[&tape.scores, dy])?,
            "bxyin,yik->bxynk",
            "bxynk,bxyin->yik",
        ),
    };
    let dq = contract(d_q, &[&d_scores, &tape.p])?;
    let dp = contract(d_p, &[q, &d_scores])?;
    let extent = match axis {
        Axis::Column => cfg.height,
        Axis::Row => cfg.width,
    };
    let reindex = super::kernels::build_reindex_tensor(extent, cfg.window)?;
    let dr = contract("xir,xik->rk", &[&reindex, &dp])?;
    Ok((dq, d_values, dr))
}

/// Exact gradients of `sum(upstream * gsa_forward(x))` from a recorded pass.
///
/// BN layers are differentiated in the mode the pass was recorded with, so a
/// train-mode tape differentiates through batch statistics.
pub fn gsa_backward(
    pass: &GsaPass,
    params: &GsaParams,
    cfg: &GsaConfig,
    upstream: &Tensor,
) -> Result<GsaGrads> {
    let tape = &pass.tape;
    upstream.expect_same_shape(&pass.output)?;
    let heads = cfg.n_heads;

    let (d_sum, d_out_gamma, d_out_beta) =
        batch_norm_backward(upstream, &tape.out_cache, &params.bn_out.gamma)?;
    let dy = split_heads(d_sum, heads)?;

    let mut dq: Option<Tensor> = None;
    let mut dq_eff: Option<Tensor> = None;
    let mut dv: Option<Tensor> = None;
    let mut dk: Option<Tensor> = None;

    match &tape.content {
        Some(ContentTape::Global { k_hat, context }) => {
            accumulate(&mut dq_eff, contract("bxynv,bnkv->bxynk", &[&dy, context])?)?;
            let d_context = contract("bxynk,bxynv->bnkv", &[&tape.q_eff, &dy])?;
            let d_khat = contract("bnkv,bxynv->bxynk", &[&d_context, &tape.v.out])?;
            accumulate(
                &mut dv,
                contract("bxynk,bnkv->bxynv", &[k_hat, &d_context])?,
            )?;
            dk = Some(softmax_backward(k_hat, &d_khat, &[1, 2])?);
        }
        Some(ContentTape::Axial {
            k_col,
            ctx_col,
            y_col,
            k_row,
            ctx_row,
        }) => {
            accumulate(
                &mut dq_eff,
                contract("bxynv,bxnkv->bxynk", &[&dy, ctx_row])?,
            )?;
            let d_ctx_row = contract("bxynk,bxynv->bxnkv", &[&tape.q_eff, &dy])?;
            let d_krow = contract("bxnkv,bxynv->bxynk", &[&d_ctx_row, y_col])?;
            let d_ycol = contract("bxynk,bxnkv->bxynv", &[k_row, &d_ctx_row])?;
            accumulate(
                &mut dq_eff,
                contract("bxynv,bynkv->bxynk", &[&d_ycol, ctx_col])?,
            )?;
            let d_ctx_col = contract("bxynk,bxynv->bynkv", &[&tape.q_eff, &d_ycol])?;
            let d_kcol = contract("bynkv,bxynv->bxynk", &[&d_ctx_col, &tape.v.out])?;
            accumulate(
                &mut dv,
                contract("bxynk,bynkv->bxynv", &[k_col, &d_ctx_col])?,
            )?;
            let mut g = softmax_backward(k_col, &d_kcol, &[1])?;
            g.add_assign(&softmax_backward(k_row, &d_krow, &[2])?)?;
            dk = Some(g);
        }
        None => {}
    }
    if let Some(g) = dq_eff {
        let g = if cfg.softmax_on_queries {
            softmax_backward(&tape.q_eff, &g, &[4])?
        } else {
            g
        };
        accumulate(&mut dq, g)?;
    }

    let mut dr_col = zeros_like(&params.emb.r_col);
    let mut dr_row = zeros_like(&params.emb.r_row);
    let mut d_mid_gamma = zeros_like(&params.bn_mid.gamma);
    let mut d_mid_beta = zeros_like(&params.bn_mid.beta);
    if cfg.positional() {
        let mut d_values = dy.clone();
        if let Some(row) = &tape.row {
            let (g_q, g_v, g_r) = axis_backward(row, &tape.q.out, &d_values, Axis::Row, cfg)?;
            accumulate(&mut dq, g_q)?;
            dr_row = g_r;
            d_values = g_v;
        }
        if let Some(col) = &tape.col {
            if let Some(cache) = &tape.mid {
                let (g, gg, gb) =
                    batch_norm_backward(&merge_heads(d_values)?, cache, &params.bn_mid.gamma)?;
                d_mid_gamma = gg;
                d_mid_beta = gb;
                d_values = split_heads(g, heads)?;
            }
            let (g_q, g_v, g_r) = axis_backward(col, &tape.q.out, &d_values, Axis::Column, cfg)?;
            accumulate(&mut dq, g_q)?;
            dr_col = g_r;
            d_values = g_v;
        }
        accumulate(&mut dv, d_values)?;
    }

    let mut dx = zeros_like(&tape.x);
    let mut proj_grads = |proj: Option<&Projection>,
                          grad: Option<Tensor>,
                          w: &Tensor,
                          bn: &BatchNormState|
     -> Result<(Tensor, Tensor, Tensor)> {
        match (proj, grad) {
            (Some(p), Some(g)) => {
                let (dz, dgamma, dbeta) =
                    batch_norm_backward(&merge_heads(g)?, &p.cache, &bn.gamma)?;
                let d_in = w.shape()[0];
                let d_proj = w.shape()[1];
                let pixels = dz.numel() / d_proj;
                let x2 = tape.x.clone().reshape(&[pixels, d_in])?;
                let dz2 = dz.clone().reshape(&[pixels, d_proj])?;
                let dw = contract("pd,pe->de", &[&x2, &dz2])?;
                dx.add_assign(&contract("pe,de->pd", &[&dz2, w])?.reshape(tape.x.shape())?)?;
                Ok((dw, dgamma, dbeta))
            }
            _ => Ok((zeros_like(w), zeros_like(&bn.gamma), zeros_like(&bn.beta))),
        }
    };
    let kqv = &params.kqv;
    let (dwk, dkg, dkb) = proj_grads(tape.k.as_ref(), dk, &kqv.w_k, &kqv.bn_k)?;
    let (dwq, dqg, dqb) = proj_grads(Some(&tape.q), dq, &kqv.w_q, &kqv.bn_q)?;
    let (dwv, dvg, dvb) = proj_grads(Some(&tape.v), dv, &kqv.w_v, &kqv.bn_v)?;

    let mut grads = params.clone();
    grads.kqv.w_k = dwk;
    grads.kqv.w_q = dwq;
    grads.kqv.w_v = dwv;
    grads.kqv.bn_k.gamma = dkg;
    grads.kqv.bn_k.beta = dkb;
    grads.kqv.bn_q.gamma = dqg;
    grads.kqv.bn_q.beta = dqb;
    grads.kqv.bn_v.gamma = dvg;
    grads.kqv.bn_v.beta = dvb;
    grads.emb.r_col = dr_col;
    grads.emb.r_row = dr_row;
    grads.bn_mid.gamma = d_mid_gamma;
    grads.bn_mid.beta = d_mid_beta;
    grads.bn_out.gamma = d_out_gamma;
    grads.bn_out.beta = d_out_beta;
    Ok(GsaGrads {
        x: dx,
        params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::kernels::{content_attention, kqv_project, positional_attention};
    use crate::tensor::{seeded_init, InitScheme};

    fn setup(cfg: &GsaConfig, seed: u64) -> (Tensor, GsaParams) {
        let x = seeded_init(
            &[2, cfg.height, cfg.width, cfg.d_in],
            InitScheme::StandardNormal,
            seed,
        );
        (x, GsaParams::init(cfg, seed + 100).unwrap())
    }

    #[test]
    fn content_only_equals_kernel_plus_bn() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3).with_branches(true, false, false);
        let (x, p) = setup(&cfg, 1);
        let kqv = kqv_project(&x, &p.kqv, &cfg, BnMode::Infer).unwrap();
        let yc = content_attention(kqv.k.as_ref().unwrap(), &kqv.q, &kqv.v, &cfg).unwrap();
        let (expect, _) =
            crate::tensor::batch_norm(&merge_heads(yc).unwrap(), &p.bn_out, BnMode::Infer).unwrap();
        let y = gsa_forward(&x, &p, &cfg, BnMode::Infer).unwrap();
        assert!(y.max_rel_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn column_only_with_zero_embedding_is_beta() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3).with_branches(false, true, false);
        let (x, mut p) = setup(&cfg, 2);
        p.emb.r_col = Tensor::zeros(p.emb.r_col.shape());
        p.bn_out.beta = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = gsa_forward(&x, &p, &cfg, BnMode::Infer).unwrap();
        for px in y.data().chunks(4) {
            assert_eq!(px, p.bn_out.beta.data());
        }
    }

    #[test]
    fn branches_add_before_output_bn() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 4, 4);
        let (x, p) = setup(&cfg, 3);
        let pass = gsa_forward_recorded(&x, &p, &cfg, BnMode::Infer).unwrap();
        let kqv = kqv_project(&x, &p.kqv, &cfg, BnMode::Infer).unwrap();
        let yc =
            merge_heads(content_attention(kqv.k.as_ref().unwrap(), &kqv.q, &kqv.v, &cfg).unwrap())
                .unwrap();
        let yp = merge_heads(
            positional_attention(&kqv.q, &kqv.v, &p.emb, &p.bn_mid, &cfg, BnMode::Infer).unwrap(),
        )
        .unwrap();
        let pre = pass
            .tape
            .content_out
            .as_ref()
            .unwrap()
            .add(pass.tape.positional_out.as_ref().unwrap())
            .unwrap();
        assert!(pre.max_rel_diff(&yc.add(&yp).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3);
        let (x, p) = setup(&cfg, 4);
        let pass = gsa_forward_recorded(&x, &p, &cfg, BnMode::Train).unwrap();
        let g = gsa_backward(&pass, &p, &cfg, &Tensor::zeros(pass.output.shape())).unwrap();
        for (name, t) in g.named() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
        }
    }

    #[test]
    fn dead_branch_gradients_are_zero() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3).with_branches(true, false, true);
        let (x, p) = setup(&cfg, 5);
        let pass = gsa_forward_recorded(&x, &p, &cfg, BnMode::Train).unwrap();
        let up = seeded_init(pass.output.shape(), InitScheme::StandardNormal, 6);
        let g = gsa_backward(&pass, &p, &cfg, &up).unwrap();
        assert!(g.params.emb.r_col.data().iter().all(|&v| v == 0.0));
        assert!(g.params.bn_mid.gamma.data().iter().all(|&v| v == 0.0));
        assert!(g.params.emb.r_row.max_abs() > 0.0);
        for (name, t) in g.named() {
            assert_eq!(
                t.shape(),
                if name == "x" {
                    x.shape()
                } else {
                    p.named()
                        .iter()
                        .find(|(n, _)| *n == name)
                        .unwrap()
                        .1
                        .shape()
                }
            );
        }
    }

    #[test]
    fn train_pass_updates_running_stats() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3);
        let (x, mut p) = setup(&cfg, 7);
        let pass = gsa_forward_recorded(&x, &p, &cfg, BnMode::Train).unwrap();
        let before = p.bn_out.running_mean.clone();
        p.absorb_running_stats(&pass.bn_states);
        assert_ne!(p.bn_out.running_mean, before);
        assert!(pass.bn_states.bn_mid.is_some());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 3, 3);
        let (_, p) = setup(&cfg, 8);
        assert!(gsa_forward(&Tensor::zeros(&[1, 3, 4, 4]), &p, &cfg, BnMode::Infer).is_err());
    }
}
