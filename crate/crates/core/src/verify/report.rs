use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Outcome of comparing one computation against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub suite: String,
    pub case: String,
    pub seed: u64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    pub fn new(
        suite: &str,
        case: impl Into<String>,
        seed: u64,
        max_abs_err: f64,
        max_rel_err: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            suite: suite.to_string(),
            case: case.into(),
            seed,
            max_abs_err,
            max_rel_err,
            tolerance,
            passed: max_rel_err.is_finite() && max_rel_err <= tolerance,
        }
    }

    /// Max-norm comparison of two tensors; relative error is taken against the
    /// larger of the two max-norms.
    pub fn compare(
        suite: &str,
        case: impl Into<String>,
        seed: u64,
        actual: &Tensor,
        expected: &Tensor,
        tolerance: f64,
    ) -> Self {
        match (actual.max_abs_diff(expected), actual.max_rel_diff(expected)) {
            (Ok(abs), Ok(rel)) => Self::new(suite, case, seed, abs, rel, tolerance),
            _ => Self::new(
                suite,
                format!("{} [shape mismatch]", case.into()),
                seed,
                f64::INFINITY,
                f64::INFINITY,
                tolerance,
            ),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Aggregate view over a set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

pub fn summarize(reports: &[OracleReport]) -> Vec<SuiteSummary> {
    let mut out: Vec<SuiteSummary> = Vec::new();
    for r in reports {
        let entry = match out.iter_mut().find(|s| s.suite == r.suite) {
            Some(s) => s,
            None => {
                out.push(SuiteSummary {
                    suite: r.suite.clone(),
                    cases: 0,
                    failures: 0,
                    worst_rel_err: 0.0,
                });
                out.last_mut().unwrap()
            }
        };
        entry.cases += 1;
        entry.failures += usize::from(!r.passed);
        entry.worst_rel_err = entry.worst_rel_err.max(r.max_rel_err);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_iff_within_tolerance() {
        assert!(OracleReport::new("s", "c", 0, 0.0, 1e-11, 1e-10).passed);
        assert!(!OracleReport::new("s", "c", 0, 0.0, 2e-10, 1e-10).passed);
        assert!(!OracleReport::new("s", "c", 0, 0.0, f64::NAN, 1e-10).passed);
    }

    #[test]
    fn json_line_round_trip() {
        let r = OracleReport::new("content", "2x2", 3, 1e-15, 2e-16, 1e-10);
        let back: OracleReport = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
    }
}
