//! Point-based and rigid-body-constrained estimators, GPR localization and
//! the numeric Cramér–Rao bound.

mod crlb;
mod doa;
mod gpr;
mod point;
mod problem;
mod range;
mod rbl;
pub mod solver;

pub use crlb::{crlb_numeric, CrlbReport};
pub use doa::{doa_rbl_estimate, DoaOptions};
pub use gpr::{
    gpr_locate_nodes, gpr_predict, gpr_rbl_project, gpr_train, kernel, log_marginal_likelihood,
    GprHyperparams, GprModel, GprTrainOptions,
};
pub use point::point_ls_locate;
pub use problem::{NodeProblem, PoseProblem};
pub use range::{range_rbl_cwls, CwlsSolution, CwlsSystem, UnknownLayout};
pub(crate) use rbl::check_body_shapes;
pub use rbl::{rbl_estimate, rbl_refine};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{matrix_to_rows, GeometryError, Pose};
use crate::measurement::MeasurementError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error("unidentifiable: {0}")]
    Identifiability(String),
    #[error("normal matrix is rank deficient ({rank} of {unknowns}); deficient directions: {directions:?}")]
    RankDeficient {
        rank: usize,
        unknowns: usize,
        directions: Vec<String>,
    },
    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },
    #[error("Fisher information is singular; null-space directions: {null_space:?}")]
    SingularFisher { null_space: Vec<Vec<f64>> },
    #[error("analytic Jacobian disagrees with finite differences (relative error {0:e})")]
    JacobianMismatch(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultFlag {
    /// Rotation carries no information (single node); only translation is meaningful.
    RotationIndeterminate,
    /// Nonlinear refinement failed; the closed-form stage-1 estimate is returned.
    Unrefined,
    /// Joint estimation diverged and the body was estimated on its own.
    IndependentFallback,
    /// The body was not identifiable alone and was seeded from its constraints.
    SeededFromConstraints,
}

/// Outcome of one estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Present for rigid-body estimators.
    pub pose: Option<Pose>,
    /// `d×K` world-frame node estimates.
    pub node_positions: DMatrix<f64>,
    /// Sum of squared residuals at the returned estimate.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub covariance_est: Option<DMatrix<f64>>,
    pub objective_trace: Vec<f64>,
    pub flags: Vec<ResultFlag>,
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    pose: Option<&'a Pose>,
    node_positions: Vec<Vec<f64>>,
    objective: f64,
    iterations: usize,
    objective_trace_len: usize,
    converged: bool,
    gradient_norm: f64,
    flags: &'a [ResultFlag],
}

impl EstimationResult {
    pub fn has_flag(&self, flag: ResultFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ResultDoc {
            pose: self.pose.as_ref(),
            node_positions: matrix_to_rows(&self.node_positions),
            objective: self.objective,
            iterations: self.iterations,
            objective_trace_len: self.objective_trace.len(),
            converged: self.converged,
            gradient_norm: self.gradient_norm,
            flags: &self.flags,
        })
        .expect("result serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn result_json_shape() {
        let r = EstimationResult {
            pose: Some(Pose::planar(0.5, 1.0, 2.0).unwrap()),
            node_positions: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            objective: 0.25,
            iterations: 3,
            converged: true,
            gradient_norm: 1e-12,
            covariance_est: None,
            objective_trace: vec![1.0, 0.5, 0.25],
            flags: vec![ResultFlag::Unrefined],
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["pose"]["translation"][1], 2.0);
        assert_eq!(v["node_positions"][1][0], 2.0);
        assert_eq!(v["objective_trace_len"], 3);
        assert_eq!(v["converged"], true);
        assert_eq!(v["flags"][0], "unrefined");
    }
}
