//! Numeric Cramér–Rao bound for rigid-body pose parameters under Gaussian
//! measurement noise.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::problem::PoseProblem;
use super::{EstimationError, Result};
use crate::geometry::{matrix_to_rows, wrap_angle, Pose, RigidBodyTemplate, RotationParam};
use crate::measurement::{AnchorSet, MeasurementModel};

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const SINGULAR_TOL: f64 = 1e-10;

/// Bound on the covariance of any unbiased pose estimator.
#[derive(Debug, Clone, Serialize)]
pub struct CrlbReport {
    /// Fisher information over `[angles…, t…]`.
    #[serde(serialize_with = "as_rows")]
    pub fisher: DMatrix<f64>,
    /// Inverse of `fisher`.
    #[serde(serialize_with = "as_rows")]
    pub covariance: DMatrix<f64>,
    /// `sqrt(tr)` of the angle block (radians).
    pub angle_bound: f64,
    /// `sqrt(tr)` of the translation block.
    pub translation_bound: f64,
    /// Root of the mean per-node position variance bound.
    pub node_rmse_bound: f64,
    /// Largest finite-difference disagreement, relative to the Jacobian scale.
    pub jacobian_check: f64,
}

fn as_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(matrix_to_rows(m))
}

fn central_difference(problem: &PoseProblem<'_>, params: &DVector<f64>, doa: bool) -> DMatrix<f64> {
    let n = params.len();
    let rows = problem.residual_count();
    let mut jac = DMatrix::zeros(rows, n);
    for j in 0..n {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let diff = problem.predictions(&plus) - problem.predictions(&minus);
        let diff = if doa { diff.map(wrap_angle) } else { diff };
        jac.set_column(j, &(diff / (2.0 * FD_STEP)));
    }
    jac
}

/// `∂(node positions)/∂η`, stacked node by node.
fn node_jacobian(pose: &Pose, template: &RigidBodyTemplate) -> DMatrix<f64> {
    let d = template.dim();
    let na = RotationParam::angle_count(d);
    let k = template.len();
    let derivs = pose.rotation().derivatives();
    let mut jac = DMatrix::zeros(d * k, na + d);
    for node in 0..k {
        let c = template.nodes().column(node);
        for (a, dq) in derivs.iter().enumerate() {
            jac.view_mut((node * d, a), (d, 1)).copy_from(&(dq * c));
        }
        for i in 0..d {
            jac[(node * d + i, na + i)] = 1.0;
        }
    }
    jac
}

/// Fisher information `J = (1/σ²)·Σ ∇μ ∇μᵀ` at the true pose and its inverse.
///
/// The analytic measurement Jacobian is cross-checked against central
/// differences. A singular `J` reports its null-space directions.
pub fn crlb_numeric(
    truth: &Pose,
    template: &RigidBodyTemplate,
    anchors: &AnchorSet,
    model: &MeasurementModel,
    sigma: f64,
) -> Result<CrlbReport> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EstimationError::InvalidInput(format!(
            "the bound needs a positive noise level, got σ = {sigma}"
        )));
    }
    let d = template.dim();
    if truth.dim() != d || anchors.dim() != d {
        return Err(EstimationError::InvalidInput(format!(
            "pose is {}D, template {d}D, anchors {}D",
            truth.dim(),
            anchors.dim()
        )));
    }
    if matches!(model, MeasurementModel::Doa) && d != 2 {
        return Err(EstimationError::InvalidInput(
            "bearing bound is 2D only".into(),
        ));
    }
    let values = DMatrix::zeros(anchors.len(), template.len());
    let problem = PoseProblem {
        model,
        values: &values,
        anchors: anchors.positions(),
        template: template.nodes(),
    };
    let params = truth.to_params();
    let jac = problem.prediction_jacobian(&params);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::InvalidInput(
            "measurement function is not differentiable at the true pose".into(),
        ));
    }
    let fd = central_difference(&problem, &params, matches!(model, MeasurementModel::Doa));
    let scale = jac.amax().max(f64::MIN_POSITIVE);
    let check = (&fd - &jac).amax() / scale;
    if check.is_nan() || check > FD_TOL {
        return Err(EstimationError::JacobianMismatch(check));
    }

    // Work with the σ-free information so σ enters only as an exact scale.
    let info = jac.transpose() * &jac;
    let eig = info.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let null_space: Vec<Vec<f64>> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] <= SINGULAR_TOL * lmax.max(f64::MIN_POSITIVE))
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    if !null_space.is_empty() {
        return Err(EstimationError::SingularFisher { null_space });
    }
    let inv = info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(EstimationError::SingularFisher { null_space: vec![] })?;
    let inv = (&inv + inv.transpose()) * 0.5;
    let var = sigma * sigma;
    let covariance = inv * var;
    let fisher = info / var;

    let na = RotationParam::angle_count(d);
    let angle_bound = covariance.view((0, 0), (na, na)).trace().max(0.0).sqrt();
    let translation_bound = covariance.view((na, na), (d, d)).trace().max(0.0).sqrt();
    let nj = node_jacobian(truth, template);
    let node_cov = &nj * &covariance * nj.transpose();
    let node_rmse_bound = (node_cov.trace().max(0.0) / template.len() as f64).sqrt();
    Ok(CrlbReport {
        fisher,
        covariance,
        angle_bound,
        translation_bound,
        node_rmse_bound,
        jacobian_check: check,
    })
}
