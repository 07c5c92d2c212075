//! Seeded random instances for the oracle and property harnesses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{GsaConfig, GsaParams};
use crate::tensor::{seeded_init, BatchNormState, InitScheme, Tensor};

pub(crate) fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    seeded_init(shape, InitScheme::StandardNormal, seed)
}

/// BN state with non-trivial affine parameters and running statistics.
pub fn random_bn(channels: usize, seed: u64) -> BatchNormState {
    let mut bn = BatchNormState::identity(channels);
    bn.gamma = randn(&[channels], seed).map(|v| 1.0 + 0.3 * v);
    bn.beta = randn(&[channels], seed + 1).scale(0.3);
    bn.running_mean = randn(&[channels], seed + 2).scale(0.5);
    bn.running_var = randn(&[channels], seed + 3).map(|v| 0.5 + v * v);
    bn
}

/// Random K, Q, V head tensors `[b, h, w, n, c]`.
#[derive(Debug, Clone)]
pub struct HeadCase {
    pub k: Tensor,
    pub q: Tensor,
    pub v: Tensor,
    pub cfg: GsaConfig,
}

impl HeadCase {
    pub fn describe(&self) -> String {
        format!(
            "K{:?} V{:?} window={} sq={}",
            self.k.shape(),
            self.v.shape(),
            self.cfg.window,
            self.cfg.softmax_on_queries
        )
    }
}

/// Every tenth seed is a single pixel and every tenth (offset by one) has
/// identical keys at all pixels, so degenerate cases appear in every suite.
pub fn random_heads(seed: u64, max_extent: usize) -> HeadCase {
    let mut r = rng(seed, 1);
    let (h, w) = match seed % 10 {
        0 => (1, 1),
        _ => (
            r.random_range(1..=max_extent),
            r.random_range(1..=max_extent),
        ),
    };
    let b = r.random_range(1..=2);
    let n = r.random_range(1..=2);
    let kc = r.random_range(1..=3);
    let vc = r.random_range(1..=3);
    let mut k = randn(&[b, h, w, n, kc], seed.wrapping_mul(7) + 1);
    if seed % 10 == 1 {
        let first: Vec<f64> = k.data()[..n * kc].to_vec();
        for chunk in k.data_mut().chunks_mut(n * kc) {
            chunk.copy_from_slice(&first);
        }
    }
    let q = randn(&[b, h, w, n, kc], seed.wrapping_mul(7) + 2);
    let v = randn(&[b, h, w, n, vc], seed.wrapping_mul(7) + 3);
    let mut cfg = GsaConfig::new(1, n * kc, n * vc, n, h, w);
    cfg.window = r.random_range(1..=h.max(w));
    cfg.softmax_on_queries = r.random_bool(0.25);
    HeadCase { k, q, v, cfg }
}

/// A complete module instance: input, parameters (with randomized BN) and config.
#[derive(Debug, Clone)]
pub struct ModuleCase {
    pub x: Tensor,
    pub params: GsaParams,
    pub cfg: GsaConfig,
}

impl ModuleCase {
    pub fn describe(&self) -> String {
        let c = &self.cfg;
        format!(
            "x{:?} d_k={} d_out={} heads={} window={} branches={}{}{} sq={} axial={}",
            self.x.shape(),
            c.d_k,
            c.d_out,
            c.n_heads,
            c.window,
            u8::from(c.content),
            u8::from(c.column),
            u8::from(c.row),
            c.softmax_on_queries,
            c.axial_content
        )
    }
}

pub fn randomize_bn(params: &mut GsaParams, seed: u64) {
    params.kqv.bn_k = random_bn(params.kqv.bn_k.channels(), seed + 10);
    params.kqv.bn_q = random_bn(params.kqv.bn_q.channels(), seed + 20);
    params.kqv.bn_v = random_bn(params.kqv.bn_v.channels(), seed + 30);
    params.bn_mid = random_bn(params.bn_mid.channels(), seed + 40);
    params.bn_out = random_bn(params.bn_out.channels(), seed + 50);
}

/// Random module configuration; branch flags and variants vary with the seed.
pub fn random_module(seed: u64, max_extent: usize) -> ModuleCase {
    let mut r = rng(seed, 2);
    let (h, w) = if seed.is_multiple_of(10) {
        (1, 1)
    } else {
        (
            r.random_range(1..=max_extent),
            r.random_range(1..=max_extent),
        )
    };
    let b = r.random_range(1..=2);
    let n = r.random_range(1..=2);
    let d_in = r.random_range(1..=4);
    let mut cfg = GsaConfig::new(
        d_in,
        n * r.random_range(1..=3),
        n * r.random_range(1..=3),
        n,
        h,
        w,
    );
    cfg.window = r.random_range(1..=h.max(w));
    loop {
        cfg.content = r.random_bool(0.7);
        cfg.column = r.random_bool(0.7);
        cfg.row = r.random_bool(0.7);
        if cfg.content || cfg.column || cfg.row {
            break;
        }
    }
    cfg.softmax_on_queries = r.random_bool(0.2);
    cfg.axial_content = r.random_bool(0.2);
    let mut params = GsaParams::init(&cfg, seed.wrapping_mul(13) + 5).expect("valid random config");
    randomize_bn(&mut params, seed.wrapping_mul(17));
    if seed % 10 == 1 {
        params.kqv.w_k = Tensor::zeros(params.kqv.w_k.shape());
    }
    let x = randn(&[b, h, w, d_in], seed.wrapping_mul(19) + 7);
    ModuleCase { x, params, cfg }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_deterministic_and_valid() {
        for seed in 0..30 {
            let a = random_module(seed, 4);
            let b = random_module(seed, 4);
            assert_eq!(a.x, b.x);
            assert_eq!(a.cfg, b.cfg);
            a.cfg.validate().unwrap();
            a.params.check_shapes(&a.cfg).unwrap();
            let hc = random_heads(seed, 5);
            hc.cfg.validate().unwrap();
        }
        assert_eq!(random_heads(10, 5).k.shape()[1..3], [1, 1]);
    }
}
