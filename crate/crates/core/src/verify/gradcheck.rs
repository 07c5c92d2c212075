//! Central finite-difference gradient checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cases::{randn, randomize_bn, rng};
use super::report::OracleReport;
use crate::attention::{gsa_backward, gsa_forward_recorded, GsaConfig, GsaParams};
use crate::tensor::{BnMode, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Scale, relative to the largest analytic gradient entry overall, below which
/// a parameter class is compared in absolute terms.
pub const CLASS_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("non-finite loss perturbing `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("analytic gradient list does not match parameters: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassError {
    pub name: String,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub step: f64,
    pub classes: Vec<ClassError>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&ClassError> {
        self.classes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.rel_err)
    }

    pub fn to_report(&self, suite: &str, case: &str, seed: u64, tolerance: f64) -> OracleReport {
        let worst = self.worst();
        let label = worst.map_or(case.to_string(), |w| format!("{case} worst={}", w.name));
        OracleReport::new(
            suite,
            label,
            seed,
            worst.map_or(0.0, |w| w.max_abs_err),
            self.worst_rel_err(),
            tolerance,
        )
    }
}

/// Compares `analytic` gradients of `loss` against central differences with
/// the given step, one scalar at a time.
///
/// For each parameter class the error is `max|a - n| / max(|a|_inf, |n|_inf, floor)`
/// where `floor = CLASS_FLOOR * max_k |a_k|` over all classes. Classes whose true
/// gradient vanishes identically are thereby judged against the overall gradient scale
/// rather than against rounding noise.
pub fn grad_check<F>(
    loss: F,
    params: &[(String, Tensor)],
    analytic: &[(String, Tensor)],
    step: f64,
) -> Result<GradReport, GradCheckError>
where
    F: Fn(&[(String, Tensor)]) -> f64,
{
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|((a, t), (b, g))| a != b || t.shape() != g.shape())
    {
        return Err(GradCheckError::Mismatch(format!(
            "{} params vs {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let global = analytic
        .iter()
        .map(|(_, g)| g.max_abs())
        .fold(0.0, f64::max);
    let floor = (CLASS_FLOOR * global).max(f64::MIN_POSITIVE);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut classes = Vec::with_capacity(params.len());
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.numel());
        for i in 0..grad.numel() {
            let orig = work[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + step;
            let plus = loss(&work);
            work[p].1.data_mut()[i] = orig - step;
            let minus = loss(&work);
            work[p].1.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    name: name.clone(),
                    index: i,
                });
            }
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_err = grad
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = grad
            .max_abs()
            .max(numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .max(floor);
        classes.push(ClassError {
            name: name.clone(),
            max_abs_err,
            rel_err: max_abs_err / scale,
        });
    }
    Ok(GradReport { step, classes })
}

fn to_params(pairs: &[(String, Tensor)], template: &GsaParams) -> (Tensor, GsaParams) {
    let mut params = template.clone();
    let mut x = None;
    for (name, t) in pairs {
        if name == "x" {
            x = Some(t.clone());
        }
    }
    for (name, slot) in params.named_mut() {
        if let Some((_, t)) = pairs.iter().find(|(n, _)| n == name) {
            *slot = t.clone();
        }
    }
    (x.expect("x present"), params)
}

/// Instance used by the module gradient check: `[2, h, w, d]` input, randomized BN.
pub fn gsa_grad_instance(cfg: &GsaConfig, seed: u64) -> (Tensor, GsaParams, Tensor) {
    let x = randn(
        &[2, cfg.height, cfg.width, cfg.d_in],
        seed.wrapping_mul(31) + 1,
    );
    let mut params = GsaParams::init(cfg, seed.wrapping_mul(31) + 2).expect("valid config");
    randomize_bn(&mut params, seed.wrapping_mul(31) + 3);
    let upstream = randn(
        &[2, cfg.height, cfg.width, cfg.d_out],
        seed.wrapping_mul(31) + 4,
    );
    (x, params, upstream)
}

/// Gradient check of the full module in train mode (BN on batch statistics)
/// for the loss `sum(upstream * y)`.
pub fn gsa_grad_check(cfg: &GsaConfig, seed: u64, step: f64) -> Result<GradReport, GradCheckError> {
    let (x, params, upstream) = gsa_grad_instance(cfg, seed);
    let pass = gsa_forward_recorded(&x, &params, cfg, BnMode::Train)
        .map_err(|e| GradCheckError::Mismatch(e.to_string()))?;
    let grads = gsa_backward(&pass, &params, cfg, &upstream)
        .map_err(|e| GradCheckError::Mismatch(e.to_string()))?;

    let mut flat: Vec<(String, Tensor)> = vec![("x".to_string(), x.clone())];
    flat.extend(
        params
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone())),
    );
    let analytic: Vec<(String, Tensor)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();

    let loss = |pairs: &[(String, Tensor)]| {
        let (x, p) = to_params(pairs, &params);
        match gsa_forward_recorded(&x, &p, cfg, BnMode::Train) {
            Ok(pass) => pass.output.dot(&upstream).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };
    grad_check(loss, &flat, &analytic, step)
}

/// A 3x3, 2-head, 4-channel configuration with variant flags drawn from the seed.
pub fn small_grad_config(seed: u64) -> GsaConfig {
    use rand::Rng;
    let mut r = rng(seed, 3);
    let mut cfg = GsaConfig::new(4, 4, 4, 2, 3, 3);
    cfg.window = r.random_range(1..=3);
    cfg.softmax_on_queries = seed % 4 == 3;
    cfg.axial_content = seed % 5 == 4;
    cfg
}
