use super::doa::{doa_rbl_estimate, DoaOptions};
use super::point::check_shapes;
use super::problem::PoseProblem;
use super::range::{cwls_pose, range_rbl_cwls};
use super::solver::{covariance_estimate, gauss_newton, GaussNewtonOptions, Solution};
use super::{EstimationError, EstimationResult, Result, ResultFlag};
use crate::geometry::{apply_pose, Pose, RigidBodyTemplate};
use crate::measurement::{AnchorSet, MeasurementModel, ObservationSet};

/// Shape checks shared by single-body and joint estimation.
pub(crate) fn check_body_shapes(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
) -> Result<()> {
    check_shapes(obs, anchors)?;
    if template.dim() != anchors.dim() {
        return Err(EstimationError::InvalidInput(format!(
            "template is {}D but anchors are {}D",
            template.dim(),
            anchors.dim()
        )));
    }
    if obs.node_count() != template.len() {
        return Err(EstimationError::InvalidInput(format!(
            "{} observed nodes for a {}-node template",
            obs.node_count(),
            template.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_rbl_inputs(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
) -> Result<()> {
    check_body_shapes(obs, anchors, template)?;
    let p = Pose::param_count(template.dim());
    if obs.values.len() < p {
        return Err(EstimationError::Identifiability(format!(
            "{} measurements for {p} pose parameters",
            obs.values.len()
        )));
    }
    Ok(())
}

pub(crate) fn pose_problem<'a>(
    obs: &'a ObservationSet,
    anchors: &'a AnchorSet,
    template: &'a RigidBodyTemplate,
) -> PoseProblem<'a> {
    PoseProblem {
        model: &obs.model,
        values: &obs.values,
        anchors: anchors.positions(),
        template: template.nodes(),
    }
}

pub(crate) fn result_from_solution(
    problem: &PoseProblem<'_>,
    template: &RigidBodyTemplate,
    sol: &Solution,
    flags: Vec<ResultFlag>,
) -> Result<EstimationResult> {
    let pose = Pose::from_params(template.dim(), sol.params.as_slice())?;
    let nodes = apply_pose(template, &pose)?.positions;
    Ok(EstimationResult {
        pose: Some(pose),
        node_positions: nodes,
        objective: sol.objective,
        iterations: sol.iterations,
        converged: sol.converged,
        gradient_norm: sol.gradient_norm,
        covariance_est: covariance_estimate(problem, &sol.params, sol.objective),
        objective_trace: sol.trace.clone(),
        flags,
    })
}

/// Gauss–Newton over the pose parameters starting from `init`.
pub fn rbl_refine(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    init: &Pose,
    opts: &GaussNewtonOptions,
) -> Result<EstimationResult> {
    check_rbl_inputs(obs, anchors, template)?;
    let problem = pose_problem(obs, anchors, template);
    let sol = gauss_newton(&problem, &init.to_params(), opts);
    result_from_solution(&problem, template, &sol, Vec::new())
}

/// Rigid-body estimate with the modality's default strategy: multi-start
/// bearings for DoA, closed-form CWLS plus refinement for range, and
/// range-converted CWLS plus refinement on the raw powers for RSSI.
pub fn rbl_estimate(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    init: Option<&Pose>,
    opts: &GaussNewtonOptions,
) -> Result<EstimationResult> {
    match (&obs.model, init) {
        (MeasurementModel::Doa, _) => doa_rbl_estimate(
            obs,
            anchors,
            template,
            init,
            &DoaOptions {
                solver: *opts,
                ..DoaOptions::default()
            },
        ),
        (_, Some(p)) => rbl_refine(obs, anchors, template, p, opts),
        (MeasurementModel::Range, None) => range_rbl_cwls(obs, anchors, template, None, opts),
        (MeasurementModel::Rssi(params), None) => {
            check_rbl_inputs(obs, anchors, template)?;
            let ranges = obs.values.map(|v| params.distance_for(v));
            let start = cwls_pose(&ranges, anchors, template, None)?;
            rbl_refine(obs, anchors, template, &start, opts)
        }
    }
}
