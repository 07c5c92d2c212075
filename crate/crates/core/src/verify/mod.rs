//! Brute-force oracles, equivariance and gradient harnesses, and the seeded
//! suites that tie them together.

mod cases;
mod equivariance;
mod gradcheck;
pub mod oracle;
mod report;
mod suite;

pub use cases::{
    randn, random_bn, random_heads, random_module, randomize_bn, HeadCase, ModuleCase,
};
pub use equivariance::{
    equivariance_check, permutation_check, translation_check, EquivarianceKind,
};
pub use gradcheck::{
    grad_check, gsa_grad_check, gsa_grad_instance, small_grad_config, ClassError, GradCheckError,
    GradReport, CLASS_FLOOR, DEFAULT_STEP,
};
pub use report::{summarize, OracleReport, SuiteSummary};
pub use suite::{
    content_case, default_cases, equivariance_case, forward_case, gradient_case, positional_case,
    run_suite, Suite, EXACT_TOLERANCE, GRADIENT_TOLERANCE,
};
