//! Permutation and translation equivariance harnesses.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cases::{randn, random_bn, random_heads, rng};
use super::report::OracleReport;
use crate::attention::{content_attention, positional_attention, GsaConfig, RelPosEmbedding};
use crate::tensor::{BnMode, Tensor};
use crate::Result;

pub const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquivarianceKind {
    Permutation,
    Translation,
}

/// Reorders the pixels of a `[b, h, w, n, c]` tensor: output pixel `p` is input pixel `perm[p]`.
fn permute_pixels(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let per_pixel = s[3] * s[4];
    let npx = s[1] * s[2];
    let mut out = t.clone();
    for b in 0..s[0] {
        for (p, &src) in perm.iter().enumerate() {
            let dst = (b * npx + p) * per_pixel;
            let from = (b * npx + src) * per_pixel;
            out.data_mut()[dst..dst + per_pixel].copy_from_slice(&t.data()[from..from + per_pixel]);
        }
    }
    out
}

/// Compares `content_attention(pi K, pi Q, pi V)` against `pi content_attention(K, Q, V)`.
pub fn permutation_check(
    k: &Tensor,
    q: &Tensor,
    v: &Tensor,
    cfg: &GsaConfig,
    perm: &[usize],
) -> Result<(Tensor, Tensor)> {
    let base = content_attention(k, q, v, cfg)?;
    let moved = content_attention(
        &permute_pixels(k, perm),
        &permute_pixels(q, perm),
        &permute_pixels(v, perm),
        cfg,
    )?;
    Ok((moved, permute_pixels(&base, perm)))
}

/// Shifts content down by `shift` rows; vacated rows get `fill`'s first rows.
fn shift_rows(t: &Tensor, shift: usize, fill: &Tensor) -> Tensor {
    let s = t.shape();
    let row = s[2] * s[3] * s[4];
    let mut out = t.clone();
    for b in 0..s[0] {
        let base = b * s[1] * row;
        for x in 0..s[1] {
            let src = if x >= shift {
                &t.data()[base + (x - shift) * row..][..row]
            } else {
                &fill.data()[base + x * row..][..row]
            };
            out.data_mut()[base + x * row..][..row].copy_from_slice(src);
        }
    }
    out
}

fn rows(t: &Tensor, from: usize, to: usize) -> Tensor {
    let s = t.shape();
    let row = s[2] * s[3] * s[4];
    let mut data = Vec::new();
    for b in 0..s[0] {
        let base = b * s[1] * row;
        data.extend_from_slice(&t.data()[base + from * row..base + to * row]);
    }
    Tensor::new(vec![s[0], to - from, s[2], s[3], s[4]], data).expect("row slice")
}

/// Translation check of the positional branch (inference mode). Returns the
/// shifted-input outputs and the shifted reference outputs restricted to rows
/// whose windows are fully inside the image before and after the shift.
pub fn translation_check(
    q: &Tensor,
    v: &Tensor,
    emb: &RelPosEmbedding,
    bn_mid: &crate::tensor::BatchNormState,
    cfg: &GsaConfig,
    shift: usize,
    fill_seed: u64,
) -> Result<Option<(Tensor, Tensor)>> {
    let h = cfg.height;
    let lo = shift + cfg.window;
    if lo + cfg.window >= h {
        return Ok(None);
    }
    let hi = h - cfg.window;
    let fill_q = randn(q.shape(), fill_seed);
    let fill_v = randn(v.shape(), fill_seed + 1);
    let base = positional_attention(q, v, emb, bn_mid, cfg, BnMode::Infer)?;
    let moved = positional_attention(
        &shift_rows(q, shift, &fill_q),
        &shift_rows(v, shift, &fill_v),
        emb,
        bn_mid,
        cfg,
        BnMode::Infer,
    )?;
    Ok(Some((
        rows(&moved, lo, hi),
        rows(&base, lo - shift, hi - shift),
    )))
}

fn seeded_permutation(npx: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..npx).collect();
    if !seed.is_multiple_of(10) {
        perm.shuffle(&mut rng(seed, 11));
    }
    perm
}

/// One seeded equivariance case. Seeds divisible by ten use the identity
/// permutation (resp. a zero shift).
pub fn equivariance_check(kind: EquivarianceKind, seed: u64) -> Result<OracleReport> {
    match kind {
        EquivarianceKind::Permutation => {
            let mut case = random_heads(seed, 4);
            if seed.is_multiple_of(10) {
                case = random_heads(seed + 1, 4);
            }
            let s = case.k.shape().to_vec();
            let perm = seeded_permutation(s[1] * s[2], seed);
            let (actual, expected) =
                permutation_check(&case.k, &case.q, &case.v, &case.cfg, &perm)?;
            Ok(OracleReport::compare(
                "permutation",
                case.describe(),
                seed,
                &actual,
                &expected,
                TOLERANCE,
            ))
        }
        EquivarianceKind::Translation => {
            let mut r = rng(seed, 12);
            let (h, w) = (12, r.random_range(1..=5));
            let n = r.random_range(1..=2);
            let (kc, vc) = (r.random_range(1..=3), r.random_range(1..=2));
            let mut cfg = GsaConfig::new(1, n * kc, n * vc, n, h, w);
            cfg.window = r.random_range(1..=2);
            cfg.content = false;
            cfg.row = r.random_bool(0.7);
            let shift = if seed.is_multiple_of(10) {
                0
            } else {
                r.random_range(1..=3)
            };
            let q = randn(
                &[r.random_range(1..=2), h, w, n, kc],
                seed.wrapping_mul(5) + 1,
            );
            let v = randn(&[q.shape()[0], h, w, n, vc], seed.wrapping_mul(5) + 2);
            let emb = RelPosEmbedding {
                r_col: randn(&[2 * h - 1, kc], seed.wrapping_mul(5) + 3),
                r_row: randn(&[2 * w - 1, kc], seed.wrapping_mul(5) + 4),
            };
            let bn_mid = random_bn(n * vc, seed.wrapping_mul(5) + 5);
            let case = format!(
                "Q{:?} V{:?} window={} row={} shift={shift}",
                q.shape(),
                v.shape(),
                cfg.window,
                cfg.row
            );
            let (actual, expected) =
                translation_check(&q, &v, &emb, &bn_mid, &cfg, shift, seed.wrapping_mul(5) + 6)?
                    .expect("window leaves interior rows");
            Ok(OracleReport::compare(
                "translation",
                case,
                seed,
                &actual,
                &expected,
                TOLERANCE,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_permutation_and_zero_shift_are_exact() {
        let p = equivariance_check(EquivarianceKind::Permutation, 10).unwrap();
        assert_eq!(p.max_abs_err, 0.0);
        let t = equivariance_check(EquivarianceKind::Translation, 20).unwrap();
        assert_eq!(t.max_abs_err, 0.0);
    }

    #[test]
    fn random_permutation_on_4x4() {
        let cfg = GsaConfig::new(4, 4, 4, 2, 4, 4);
        let k = randn(&[1, 4, 4, 2, 2], 1);
        let q = randn(&[1, 4, 4, 2, 2], 2);
        let v = randn(&[1, 4, 4, 2, 2], 3);
        let perm = seeded_permutation(16, 7);
        assert_ne!(perm, (0..16).collect::<Vec<_>>());
        let (a, e) = permutation_check(&k, &q, &v, &cfg, &perm).unwrap();
        assert!(a.max_rel_diff(&e).unwrap() <= 1e-10);
    }

    #[test]
    fn seeded_cases_pass() {
        for seed in 0..20 {
            for kind in [EquivarianceKind::Permutation, EquivarianceKind::Translation] {
                let r = equivariance_check(kind, seed).unwrap();
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn shift_breaks_equality_near_the_border() {
        // Including border rows must expose the boundary effect, otherwise the
        // interior mask would be vacuous.
        let cfg = GsaConfig::new(1, 1, 1, 1, 12, 1)
            .with_window(2)
            .with_branches(false, true, false);
        let q = randn(&[1, 12, 1, 1, 1], 1);
        let v = randn(&[1, 12, 1, 1, 1], 2);
        let emb = RelPosEmbedding {
            r_col: randn(&[23, 1], 3),
            r_row: randn(&[1, 1], 4),
        };
        let bn = random_bn(1, 5);
        let base = positional_attention(&q, &v, &emb, &bn, &cfg, BnMode::Infer).unwrap();
        let moved = positional_attention(
            &shift_rows(&q, 2, &randn(q.shape(), 6)),
            &shift_rows(&v, 2, &randn(v.shape(), 7)),
            &emb,
            &bn,
            &cfg,
            BnMode::Infer,
        )
        .unwrap();
        assert!(rows(&moved, 2, 3).max_rel_diff(&rows(&base, 0, 1)).unwrap() > 1e-6);
    }
}
