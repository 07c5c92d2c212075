use serde::{Deserialize, Serialize};

use super::contract::batched_matmul;
use super::{Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Softmax over the given set of axes, independently for every slice of the
/// remaining axes. Uses max subtraction.
pub fn softmax(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let (perm, inner) = softmax_layout(t, axes)?;
    let moved = t.permute(&perm)?;
    let mut data = moved.into_data();
    for row in data.chunks_mut(inner) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let moved_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    Tensor::new(moved_shape, data)?.permute(&inverse(&perm))
}

/// Gradient through `s = softmax(z, axes)`: `dz = s * (ds - sum_axes(ds * s))`.
pub fn softmax_backward(s: &Tensor, ds: &Tensor, axes: &[usize]) -> Result<Tensor> {
    s.expect_same_shape(ds)?;
    let (perm, inner) = softmax_layout(s, axes)?;
    let sm = s.permute(&perm)?;
    let dm = ds.permute(&perm)?;
    let mut out = Vec::with_capacity(s.numel());
    for (srow, drow) in sm.data().chunks(inner).zip(dm.data().chunks(inner)) {
        let inner_prod: f64 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
        out.extend(
            srow.iter()
                .zip(drow)
                .map(|(&sv, &dv)| sv * (dv - inner_prod)),
        );
    }
    let moved_shape: Vec<usize> = perm.iter().map(|&p| s.shape()[p]).collect();
    Tensor::new(moved_shape, out)?.permute(&inverse(&perm))
}

fn softmax_layout(t: &Tensor, axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(TensorError::Argument(
            "softmax needs at least one axis".into(),
        ));
    }
    let rank = t.rank();
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= rank || axes[..i].contains(&ax) {
            return Err(TensorError::Argument(format!(
                "bad softmax axes {axes:?} for rank {rank}"
            )));
        }
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    let mut perm: Vec<usize> = (0..rank).filter(|a| !sorted.contains(a)).collect();
    perm.extend(&sorted);
    let inner = sorted.iter().map(|&a| t.shape()[a]).product();
    Ok((perm, inner))
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// gamma = 1, beta = 0, running statistics (0, 1).
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.numel() != c {
                return Err(TensorError::Shape(format!(
                    "BN vectors of length {c} and {}",
                    t.numel()
                )));
            }
        }
        if !(self.epsilon > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TensorError::Argument(
                "BN epsilon must be > 0 and momentum in (0,1)".into(),
            ));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Argument("negative running variance".into()));
        }
        Ok(())
    }
}

/// Intermediates kept for [`batch_norm_backward`].
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

/// Normalizes over every axis except the last (channel) axis.
///
/// Train mode uses batch statistics and returns the state with running
/// statistics blended as `momentum * running + (1 - momentum) * batch`
/// (unbiased batch variance). Infer mode returns the state unchanged.
pub fn batch_norm(
    t: &Tensor,
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BatchNormState)> {
    let (y, state, _) = batch_norm_cached(t, state, mode)?;
    Ok((y, state))
}

pub(crate) fn batch_norm_cached(
    t: &Tensor,
    state: &BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BatchNormState, BnCache)> {
    let c = *t
        .shape()
        .last()
        .ok_or_else(|| TensorError::Shape("BN on a scalar".into()))?;
    if c != state.channels() {
        return Err(TensorError::Shape(format!(
            "BN over {c} channels with state for {}",
            state.channels()
        )));
    }
    state.validate()?;
    let count = t.numel() / c;
    let (mean, var, new_state) = match mode {
        BnMode::Infer => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
            state.clone(),
        ),
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            for px in t.data().chunks(c) {
                for (m, v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for px in t.data().chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= count as f64);
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let mut next = state.clone();
            let mom = state.momentum;
            for ch in 0..c {
                next.running_mean.data_mut()[ch] =
                    mom * state.running_mean.data()[ch] + (1.0 - mom) * mean[ch];
                next.running_var.data_mut()[ch] =
                    mom * state.running_var.data()[ch] + (1.0 - mom) * var[ch] * unbias;
            }
            (mean, var, next)
        }
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let mut x_hat = t.data().to_vec();
    for px in x_hat.chunks_mut(c) {
        for ((v, m), s) in px.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    let mut y = x_hat.clone();
    let (g, b) = (state.gamma.data(), state.beta.data());
    for px in y.chunks_mut(c) {
        for ((v, gv), bv) in px.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    let shape = t.shape().to_vec();
    let cache = BnCache {
        x_hat: Tensor::new(shape.clone(), x_hat)?,
        inv_std,
        mode,
    };
    Ok((Tensor::new(shape, y)?, new_state, cache))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &BnCache,
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    dy.expect_same_shape(&cache.x_hat)?;
    let c = gamma.numel();
    let count = (dy.numel() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (d, xh) in dy.data().chunks(c).zip(cache.x_hat.data().chunks(c)) {
        for ch in 0..c {
            dbeta[ch] += d[ch];
            dgamma[ch] += d[ch] * xh[ch];
        }
    }
    let g = gamma.data();
    let mut dx = dy.data().to_vec();
    match cache.mode {
        BnMode::Infer => {
            for px in dx.chunks_mut(c) {
                for ch in 0..c {
                    px[ch] *= g[ch] * cache.inv_std[ch];
                }
            }
        }
        BnMode::Train => {
            for (px, xh) in dx.chunks_mut(c).zip(cache.x_hat.data().chunks(c)) {
                for ch in 0..c {
                    let centered = px[ch] - dbeta[ch] / count - xh[ch] * dgamma[ch] / count;
                    px[ch] = g[ch] * cache.inv_std[ch] * centered;
                }
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// 2x2 average pooling with stride 2 on a `[batch, H, W, C]` tensor.
pub fn avg_pool_2x2(t: &Tensor) -> Result<Tensor> {
    let &[b, h, w, c] = t.shape() else {
        return Err(TensorError::Shape(format!(
            "avg_pool_2x2 expects rank 4, got {:?}",
            t.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Shape(format!(
            "avg_pool_2x2 needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = t.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let dst = ((n * oh + y) * ow + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((n * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += src[s + ch];
                    }
                }
                for v in &mut out[dst..dst + c] {
                    *v *= 0.25;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

/// 1x1 convolution: mixes the trailing channel axis with a `(C_in, C_out)` matrix.
pub fn pointwise_conv(t: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let &[c_in, c_out] = weights.shape() else {
        return Err(TensorError::Shape(format!(
            "pointwise weights must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    if t.shape().last() != Some(&c_in) {
        return Err(TensorError::Shape(format!(
            "input channels {:?} vs weight rows {c_in}",
            t.shape().last()
        )));
    }
    let pixels = t.numel() / c_in;
    let data = batched_matmul(t.data(), weights.data(), 1, pixels, c_in, c_out);
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = c_out;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{contract, seeded_init, InitScheme};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        seeded_init(shape, InitScheme::StandardNormal, seed)
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let t = Tensor::new(vec![3], vec![5.0; 3]).unwrap();
        let s = softmax(&t, &[0]).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&t, &[0]).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_over_two_axes_matches_direct_evaluation() {
        let t = randn(&[4, 4, 2], 11);
        let s = softmax(&t, &[0, 1]).unwrap();
        for ch in 0..2 {
            let mut total = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    total += t.at(&[i, j, ch]).exp();
                }
            }
            for i in 0..4 {
                for j in 0..4 {
                    let expect = t.at(&[i, j, ch]).exp() / total;
                    assert!((s.at(&[i, j, ch]) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_rejects_empty_axes() {
        let t = randn(&[2, 2], 1);
        assert!(matches!(softmax(&t, &[]), Err(TensorError::Argument(_))));
        assert!(softmax(&t, &[2]).is_err());
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let z = randn(&[5], 3);
        let ds = randn(&[5], 4);
        let s = softmax(&z, &[0]).unwrap();
        let dz = softmax_backward(&s, &ds, &[0]).unwrap();
        for i in 0..5 {
            let mut expect = 0.0;
            for j in 0..5 {
                let jac = s.data()[j] * (if i == j { 1.0 } else { 0.0 } - s.data()[i]);
                expect += jac * ds.data()[j];
            }
            assert!((dz.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_identity_in_infer_mode() {
        let x = randn(&[2, 3, 3, 4], 5);
        let (y, _) = batch_norm(&x, &BatchNormState::identity(4), BnMode::Infer).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * scale - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let x = randn(&[4, 3, 3, 2], 6).map(|v| 3.0 * v + 1.5);
        let mut state = BatchNormState::identity(2);
        state.epsilon = 1e-300;
        let (y, next) = batch_norm(&x, &state, BnMode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert_ne!(next.running_mean, state.running_mean);
    }

    #[test]
    fn batch_norm_infer_matches_pointwise_formula() {
        let x = randn(&[2, 2, 3], 7);
        let mut st = BatchNormState::identity(3);
        st.gamma = randn(&[3], 8);
        st.beta = randn(&[3], 9);
        st.running_mean = randn(&[3], 10);
        st.running_var = randn(&[3], 11).map(|v| v * v + 0.1);
        let (y, _) = batch_norm(&x, &st, BnMode::Infer).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    let expect = st.gamma.at(&[c]) * (x.at(&[i, j, c]) - st.running_mean.at(&[c]))
                        / (st.running_var.at(&[c]) + st.epsilon).sqrt()
                        + st.beta.at(&[c]);
                    assert!((y.at(&[i, j, c]) - expect).abs() < 1e-14);
                }
            }
        }
        assert!(batch_norm(&x, &BatchNormState::identity(2), BnMode::Infer).is_err());
    }

    #[test]
    fn avg_pool_cases() {
        let t = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool_2x2(&t).unwrap().data(), &[2.5]);
        let c = Tensor::filled(&[2, 4, 6, 3], 1.25);
        let p = avg_pool_2x2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3, 3]);
        assert!(p.data().iter().all(|&v| v == 1.25));
        assert!(avg_pool_2x2(&Tensor::zeros(&[1, 3, 2, 1])).is_err());
    }

    #[test]
    fn avg_pool_matches_window_loop() {
        let t = randn(&[1, 4, 4, 3], 12);
        let p = avg_pool_2x2(&t).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += t.at(&[0, 2 * y + dy, 2 * x + dx, c]);
                        }
                    }
                    assert!((p.at(&[0, y, x, c]) - s / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pointwise_conv_cases() {
        let x = randn(&[1, 2, 2, 3], 13);
        assert_eq!(pointwise_conv(&x, &Tensor::identity(3)).unwrap(), x);
        let px = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            pointwise_conv(&px, &Tensor::filled(&[3, 1], 1.0))
                .unwrap()
                .data(),
            &[6.0]
        );
        let w = randn(&[3, 5], 14);
        let x3 = randn(&[2, 2, 3], 15);
        let a = pointwise_conv(&x3, &w).unwrap();
        let b = contract("xyd,de->xye", &[&x3, &w]).unwrap();
        assert!(a.max_rel_diff(&b).unwrap() < 1e-15);
        assert!(pointwise_conv(&x3, &Tensor::zeros(&[4, 2])).is_err());
    }
}
