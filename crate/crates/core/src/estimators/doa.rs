use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};

use super::rbl::{check_rbl_inputs, pose_problem, result_from_solution};
use super::solver::{gauss_newton, GaussNewtonOptions, Solution};
use super::{EstimationError, EstimationResult, Result};
use crate::geometry::{Pose, RigidBodyTemplate, RotationParam};
use crate::measurement::{AnchorSet, MeasurementModel, ObservationSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoaOptions {
    /// Evenly spaced initial rotation angles tried when no initial pose is given.
    pub starts: usize,
    pub solver: GaussNewtonOptions,
}

impl Default for DoaOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            solver: GaussNewtonOptions::default(),
        }
    }
}

/// Translation minimising the linearised bearing-line misfit for a fixed
/// rotation: each bearing puts `s_k = Q·x_k + t` on a line through its anchor.
fn translation_for_angle(
    alpha: f64,
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
) -> DVector<f64> {
    let q = RotationParam::planar(alpha).expect("finite angle").matrix();
    let rotated = q * template.nodes();
    let (m, k) = (anchors.len(), template.len());
    let mut a = DMatrix::zeros(m * k, 2);
    let mut b = DVector::zeros(m * k);
    for mi in 0..m {
        let anchor = anchors.positions().column(mi);
        for ki in 0..k {
            let row = mi * k + ki;
            let (s, c) = obs.values[(mi, ki)].sin_cos();
            a[(row, 0)] = s;
            a[(row, 1)] = -c;
            b[row] = s * (anchor[0] - rotated[(0, ki)]) - c * (anchor[1] - rotated[(1, ki)]);
        }
    }
    a.svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| anchors.positions().column_mean())
}

/// Prefers lower objective; within 1e-12, the smaller |α|, then lexicographic t.
fn better(candidate: &Solution, incumbent: &Solution) -> bool {
    let (a, b) = (candidate.objective, incumbent.objective);
    if (a - b).abs() > 1e-12 {
        return a < b;
    }
    let (ca, ia) = (candidate.params[0].abs(), incumbent.params[0].abs());
    if ca != ia {
        return ca < ia;
    }
    let ct = candidate.params.rows(1, 2);
    let it = incumbent.params.rows(1, 2);
    ct.iter()
        .zip(it.iter())
        .find(|(x, y)| x != y)
        .is_some_and(|(x, y)| x < y)
}

/// Rigid-body pose from bearings: minimises the squared wrapped bearing
/// residuals over `(α, t)`.
///
/// Without an initial pose, Gauss–Newton is started from `opts.starts`
/// evenly spaced rotation angles, each with its linearised best translation.
pub fn doa_rbl_estimate(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    init: Option<&Pose>,
    opts: &DoaOptions,
) -> Result<EstimationResult> {
    if !matches!(obs.model, MeasurementModel::Doa) {
        return Err(EstimationError::InvalidInput(format!(
            "bearing estimator given {} observations",
            obs.modality().name()
        )));
    }
    if template.dim() != 2 {
        return Err(EstimationError::InvalidInput(
            "bearing estimation is 2D only".into(),
        ));
    }
    if anchors.len() == 1 && template.len() == 1 {
        return Err(EstimationError::Identifiability(
            "one bearing to one node cannot fix a pose".into(),
        ));
    }
    check_rbl_inputs(obs, anchors, template)?;
    let problem = pose_problem(obs, anchors, template);

    let starts: Vec<DVector<f64>> = match init {
        Some(p) => vec![p.to_params()],
        None => (0..opts.starts.max(1))
            .map(|i| {
                let alpha = TAU * i as f64 / opts.starts.max(1) as f64;
                let t = translation_for_angle(alpha, obs, anchors, template);
                DVector::from_vec(vec![alpha, t[0], t[1]])
            })
            .collect(),
    };

    let mut best: Option<Solution> = None;
    for start in &starts {
        let sol = gauss_newton(&problem, start, &opts.solver);
        if !sol.objective.is_finite() {
            continue;
        }
        best = match best {
            Some(b) if !better(&sol, &b) => Some(b),
            _ => Some(sol),
        };
    }
    let best = best.ok_or_else(|| {
        EstimationError::InvalidInput("every start produced a non-finite objective".into())
    })?;
    result_from_solution(&problem, template, &best, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_pose;
    use crate::measurement::{gen_doa, NoiseSpec};

    fn square() -> RigidBodyTemplate {
        RigidBodyTemplate::from_rows(
            2,
            &[
                vec![-0.5, -0.5],
                vec![0.5, -0.5],
                vec![0.5, 0.5],
                vec![-0.5, 0.5],
            ],
            "sq",
        )
        .unwrap()
    }

    fn anchors() -> AnchorSet {
        AnchorSet::from_rows("a", 2, &[vec![0.0, 0.0], vec![10.0, 0.0], vec![5.0, 10.0]]).unwrap()
    }

    #[test]
    fn zero_noise_recovers_pose() {
        let truth = Pose::planar(2.5, 4.0, 3.5).unwrap();
        let body = apply_pose(&square(), &truth).unwrap();
        let obs = gen_doa(&body, &anchors(), &NoiseSpec::gaussian(0.0), 0).unwrap();
        let r =
            doa_rbl_estimate(&obs, &anchors(), &square(), None, &DoaOptions::default()).unwrap();
        let p = r.pose.unwrap();
        assert!((p.rotation().angles()[0] - 2.5).abs() < 1e-6);
        assert!((p.translation() - truth.translation()).norm() < 1e-6);
    }

    #[test]
    fn identity_fixed_point() {
        let a = AnchorSet::from_rows("a", 2, &[vec![-5.0, -5.0], vec![5.0, -5.0], vec![0.0, 6.0]])
            .unwrap();
        let body = apply_pose(&square(), &Pose::identity(2).unwrap()).unwrap();
        let obs = gen_doa(&body, &a, &NoiseSpec::gaussian(0.0), 0).unwrap();
        let init = Pose::identity(2).unwrap();
        let r = doa_rbl_estimate(&obs, &a, &square(), Some(&init), &DoaOptions::default()).unwrap();
        assert!(r.objective < 1e-16);
        assert!(r.pose.unwrap().to_params().norm() < 1e-12);
    }

    #[test]
    fn single_anchor_single_node_is_unidentifiable() {
        let one = RigidBodyTemplate::from_rows(2, &[vec![0.0, 0.0]], "p").unwrap();
        let a = AnchorSet::from_rows("a", 2, &[vec![0.0, 0.0]]).unwrap();
        let body = apply_pose(&one, &Pose::planar(0.0, 1.0, 1.0).unwrap()).unwrap();
        let obs = gen_doa(&body, &a, &NoiseSpec::gaussian(0.0), 0).unwrap();
        assert!(matches!(
            doa_rbl_estimate(&obs, &a, &one, None, &DoaOptions::default()),
            Err(EstimationError::Identifiability(_))
        ));
    }

    #[test]
    fn tie_break_prefers_small_angle() {
        let mk = |a: f64, o: f64| Solution {
            params: DVector::from_vec(vec![a, 0.0, 0.0]),
            objective: o,
            gradient_norm: 0.0,
            iterations: 0,
            converged: true,
            termination: crate::estimators::solver::Termination::Gradient,
            trace: vec![],
        };
        assert!(better(&mk(0.1, 1.0), &mk(-0.2, 1.0 + 1e-13)));
        assert!(!better(&mk(0.3, 1.0), &mk(-0.2, 1.0)));
        assert!(better(&mk(0.3, 0.5), &mk(0.0, 1.0)));
    }
}
