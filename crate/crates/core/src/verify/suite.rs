//! Seeded oracle and property suites, as run by `gsa verify`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cases::{randn, random_bn, random_heads, random_module};
use super::equivariance::{equivariance_check, EquivarianceKind};
use super::gradcheck::{gsa_grad_check, small_grad_config, DEFAULT_STEP};
use super::oracle::{
    oracle_axial_content_attention, oracle_content_attention, oracle_gsa_forward,
    oracle_positional_attention,
};
use super::report::OracleReport;
use crate::attention::{
    axial_content_attention, content_attention, gsa_forward, positional_attention, RelPosEmbedding,
};
use crate::tensor::{contract, softmax, BnMode};
use crate::Result;

pub const EXACT_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Content,
    Positional,
    Forward,
    Equivariance,
    Gradient,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = [
        "all",
        "content",
        "positional",
        "forward",
        "equivariance",
        "gradient",
    ];

    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![
                Suite::Content,
                Suite::Positional,
                Suite::Forward,
                Suite::Equivariance,
                Suite::Gradient,
            ],
            s => vec![s],
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Content => "content",
            Suite::Positional => "positional",
            Suite::Forward => "forward",
            Suite::Equivariance => "equivariance",
            Suite::Gradient => "gradient",
            Suite::All => "all",
        };
        f.write_str(s)
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "all" => Suite::All,
            "content" => Suite::Content,
            "positional" => Suite::Positional,
            "forward" => Suite::Forward,
            "equivariance" => Suite::Equivariance,
            "gradient" => Suite::Gradient,
            other => {
                return Err(format!(
                    "unknown suite `{other}` (expected one of {})",
                    Suite::NAMES.join(", ")
                ))
            }
        })
    }
}

/// Content attention (global and axial) against the quadratic loop oracle,
/// plus the reassociated `(Q softmax(K)^T) V` evaluation.
pub fn content_case(seed: u64) -> Result<Vec<OracleReport>> {
    let c = random_heads(seed, 4);
    let desc = c.describe();
    let global = content_attention(&c.k, &c.q, &c.v, &c.cfg)?;
    let oracle = oracle_content_attention(&c.k, &c.q, &c.v, c.cfg.softmax_on_queries);
    let axial = axial_content_attention(&c.k, &c.q, &c.v, &c.cfg)?;
    let axial_oracle = oracle_axial_content_attention(&c.k, &c.q, &c.v, c.cfg.softmax_on_queries);

    let k_hat = softmax(&c.k, &[1, 2])?;
    let q = if c.cfg.softmax_on_queries {
        softmax(&c.q, &[4])?
    } else {
        c.q.clone()
    };
    let s = c.v.shape().to_vec();
    let flat = |t: &crate::tensor::Tensor| {
        let ts = t.shape();
        t.clone().reshape(&[ts[0], ts[1] * ts[2], ts[3], ts[4]])
    };
    let weights = contract("bpnk,bqnk->bpnq", &[&flat(&q)?, &flat(&k_hat)?])?;
    let reassociated = contract("bpnq,bqnv->bpnv", &[&weights, &flat(&c.v)?])?.reshape(&s)?;

    Ok(vec![
        OracleReport::compare(
            "content",
            format!("global {desc}"),
            seed,
            &global,
            &oracle,
            EXACT_TOLERANCE,
        ),
        OracleReport::compare(
            "content",
            format!("axial {desc}"),
            seed,
            &axial,
            &axial_oracle,
            EXACT_TOLERANCE,
        ),
        OracleReport::compare(
            "content",
            format!("reassociated {desc}"),
            seed,
            &reassociated,
            &global,
            EXACT_TOLERANCE,
        ),
    ])
}

/// Positional branch (inference mode) against the neighbor-loop oracle, up to 5x5.
pub fn positional_case(seed: u64) -> Result<Vec<OracleReport>> {
    let mut m = random_module(seed, 5);
    m.cfg.content = false;
    if !(m.cfg.column || m.cfg.row) {
        m.cfg.column = true;
    }
    let (nb, ht, wd) = (m.x.shape()[0], m.cfg.height, m.cfg.width);
    let (n, kc, vc) = (
        m.cfg.n_heads,
        m.cfg.d_k / m.cfg.n_heads,
        m.cfg.d_out / m.cfg.n_heads,
    );
    let q = randn(&[nb, ht, wd, n, kc], seed.wrapping_mul(23) + 1);
    let v = randn(&[nb, ht, wd, n, vc], seed.wrapping_mul(23) + 2);
    m.params.emb = RelPosEmbedding {
        r_col: randn(&[2 * ht - 1, kc], seed.wrapping_mul(23) + 3),
        r_row: randn(&[2 * wd - 1, kc], seed.wrapping_mul(23) + 4),
    };
    m.params.bn_mid = random_bn(m.cfg.d_out, seed.wrapping_mul(23) + 5);
    let actual = positional_attention(
        &q,
        &v,
        &m.params.emb,
        &m.params.bn_mid,
        &m.cfg,
        BnMode::Infer,
    )?;
    let expected = oracle_positional_attention(&q, &v, &m.params, &m.cfg);
    let desc = format!(
        "Q{:?} V{:?} window={} col={} row={}",
        q.shape(),
        v.shape(),
        m.cfg.window,
        m.cfg.column,
        m.cfg.row
    );
    Ok(vec![OracleReport::compare(
        "positional",
        desc,
        seed,
        &actual,
        &expected,
        EXACT_TOLERANCE,
    )])
}

/// Whole module (inference mode) against the composed oracles.
pub fn forward_case(seed: u64) -> Result<Vec<OracleReport>> {
    let m = random_module(seed, 4);
    let actual = gsa_forward(&m.x, &m.params, &m.cfg, BnMode::Infer)?;
    let expected = oracle_gsa_forward(&m.x, &m.params, &m.cfg);
    Ok(vec![OracleReport::compare(
        "forward",
        m.describe(),
        seed,
        &actual,
        &expected,
        EXACT_TOLERANCE,
    )])
}

pub fn equivariance_case(seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![
        equivariance_check(EquivarianceKind::Permutation, seed)?,
        equivariance_check(EquivarianceKind::Translation, seed)?,
    ])
}

/// Finite-difference check of every parameter class on a 3x3, 2-head instance.
pub fn gradient_case(seed: u64) -> Result<Vec<OracleReport>> {
    let cfg = small_grad_config(seed);
    let desc = format!(
        "3x3 heads=2 window={} sq={} axial={}",
        cfg.window, cfg.softmax_on_queries, cfg.axial_content
    );
    let report = match gsa_grad_check(&cfg, seed, DEFAULT_STEP) {
        Ok(g) => g.to_report("gradient", &desc, seed, GRADIENT_TOLERANCE),
        Err(e) => OracleReport::new(
            "gradient",
            format!("{desc} [{e}]"),
            seed,
            f64::INFINITY,
            f64::INFINITY,
            GRADIENT_TOLERANCE,
        ),
    };
    Ok(vec![report])
}

/// Default number of seeds per case class.
pub fn default_cases(suite: Suite) -> usize {
    match suite {
        Suite::Gradient => 20,
        _ => 100,
    }
}

/// Runs `suite` over seeds `seed, seed+1, ...`; `cases` overrides the default
/// seed count per class. Reports come back in seed order regardless of threading.
pub fn run_suite(suite: Suite, seed: u64, cases: Option<usize>) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for part in suite.parts() {
        let count = cases.unwrap_or_else(|| default_cases(part)) as u64;
        let f: fn(u64) -> Result<Vec<OracleReport>> = match part {
            Suite::Content => content_case,
            Suite::Positional => positional_case,
            Suite::Forward => forward_case,
            Suite::Equivariance => equivariance_case,
            Suite::Gradient => gradient_case,
            Suite::All => unreachable!("expanded above"),
        };
        let batches: Vec<Vec<OracleReport>> = (0..count)
            .into_par_iter()
            .map(|i| f(seed.wrapping_add(i)))
            .collect::<Result<_>>()?;
        out.extend(batches.into_iter().flatten());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for name in Suite::NAMES {
            assert_eq!(name.parse::<Suite>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<Suite>().unwrap_err().contains("content"));
    }

    #[test]
    fn small_suites_pass_and_are_deterministic() {
        let a = run_suite(Suite::Content, 7, Some(12)).unwrap();
        let b = run_suite(Suite::Content, 7, Some(12)).unwrap();
        assert_eq!(a, b);
        assert!(
            a.iter().all(|r| r.passed),
            "{:?}",
            a.iter().find(|r| !r.passed)
        );
        for s in [Suite::Positional, Suite::Forward] {
            let r = run_suite(s, 3, Some(12)).unwrap();
            assert!(
                r.iter().all(|r| r.passed),
                "{:?}",
                r.iter().find(|r| !r.passed)
            );
        }
    }
}
