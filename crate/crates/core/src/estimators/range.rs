//! Range-based rigid-body localization: a closed-form weighted least-squares
//! stage on squared ranges, then Gauss–Newton refinement on raw ranges.
//!
//! Squared ranges are linear in the unknown vector
//!
//! ```text
//! y = [vec(Q) | t | u | w],   u = Qᵀt,   w = ‖t‖²
//! ```
//!
//! because for `s_k = Q·x_k + t`
//!
//! ```text
//! d²_mk − ‖a_m‖² − ‖x_k‖² = −2·a_mᵀ·Q·x_k − 2·a_mᵀ·t + 2·x_kᵀ·u + w
//! ```
//!
//! Stage 1 treats `Q` as a free `d×d` block and projects it onto the nearest
//! proper rotation afterwards. `G` has full column rank exactly when the
//! anchors and the template nodes each affinely span `d` dimensions.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::rbl::{check_rbl_inputs, pose_problem, result_from_solution};
use super::solver::{gauss_newton, GaussNewtonOptions, LeastSquaresProblem, Solution, Termination};
use super::{EstimationError, EstimationResult, Result, ResultFlag};
use crate::geometry::{Pose, RigidBodyTemplate, RotationParam};
use crate::measurement::{AnchorSet, MeasurementModel, ObservationSet};

/// Where each group of unknowns lives inside `y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLayout {
    pub dim: usize,
    /// Column-major entries of the relaxed rotation block.
    pub rotation: Range<usize>,
    pub translation: Range<usize>,
    /// Auxiliary `u = Qᵀt`.
    pub rotated_translation: Range<usize>,
    /// Auxiliary `w = ‖t‖²`.
    pub translation_norm: usize,
}

impl UnknownLayout {
    pub fn new(dim: usize) -> Self {
        let q = dim * dim;
        Self {
            dim,
            rotation: 0..q,
            translation: q..q + dim,
            rotated_translation: q + dim..q + 2 * dim,
            translation_norm: q + 2 * dim,
        }
    }

    pub fn len(&self) -> usize {
        self.translation_norm + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Human-readable name of unknown `i`.
    pub fn name(&self, i: usize) -> String {
        if self.rotation.contains(&i) {
            format!("Q[{},{}]", i % self.dim, i / self.dim)
        } else if self.translation.contains(&i) {
            format!("t[{}]", i - self.translation.start)
        } else if self.rotated_translation.contains(&i) {
            format!("u[{}]", i - self.rotated_translation.start)
        } else {
            "w".to_string()
        }
    }
}

/// The linear system `min (Gy − h)ᵀ W (Gy − h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CwlsSystem {
    pub design: DMatrix<f64>,
    pub target: DVector<f64>,
    pub weights: DMatrix<f64>,
    pub layout: UnknownLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwlsSolution {
    pub y: DVector<f64>,
    /// Unconstrained rotation block as solved.
    pub relaxed_rotation: DMatrix<f64>,
    pub pose: Pose,
}

impl CwlsSystem {
    /// Builds `G`, `h` from an `M×K` matrix of ranges. `weights` defaults to
    /// the identity.
    pub fn build(
        ranges: &DMatrix<f64>,
        anchors: &DMatrix<f64>,
        template: &DMatrix<f64>,
        weights: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let d = template.nrows();
        let (m, k) = (anchors.ncols(), template.ncols());
        if ranges.shape() != (m, k) {
            return Err(EstimationError::InvalidInput(format!(
                "range matrix is {:?}, expected ({m}, {k})",
                ranges.shape()
            )));
        }
        let layout = UnknownLayout::new(d);
        let n = m * k;
        let mut g = DMatrix::zeros(n, layout.len());
        let mut h = DVector::zeros(n);
        for mi in 0..m {
            let a = anchors.column(mi);
            for ki in 0..k {
                let x = template.column(ki);
                let row = mi * k + ki;
                h[row] = ranges[(mi, ki)].powi(2) - a.norm_squared() - x.norm_squared();
                for j in 0..d {
                    for i in 0..d {
                        g[(row, layout.rotation.start + j * d + i)] = -2.0 * a[i] * x[j];
                    }
                    g[(row, layout.translation.start + j)] = -2.0 * a[j];
                    g[(row, layout.rotated_translation.start + j)] = 2.0 * x[j];
                }
                g[(row, layout.translation_norm)] = 1.0;
            }
        }
        let weights = weights.unwrap_or_else(|| DMatrix::identity(n, n));
        if weights.shape() != (n, n) {
            return Err(EstimationError::InvalidInput(format!(
                "weight matrix is {:?}, expected ({n}, {n})",
                weights.shape()
            )));
        }
        if (&weights - weights.transpose()).amax() > 1e-12 * weights.amax().max(1.0) {
            return Err(EstimationError::InvalidInput(
                "weight matrix must be symmetric".into(),
            ));
        }
        Ok(Self {
            design: g,
            target: h,
            weights,
            layout,
        })
    }

    pub fn cost(&self, y: &DVector<f64>) -> f64 {
        let e = &self.design * y - &self.target;
        (e.transpose() * &self.weights * e)[(0, 0)]
    }

    /// `ỹ = (GᵀWG)⁻¹GᵀWh`, then projection of the rotation block onto SO(d).
    pub fn solve(&self) -> Result<CwlsSolution> {
        let gtw = self.design.transpose() * &self.weights;
        let normal = &gtw * &self.design;
        let rhs = gtw * &self.target;
        let unknowns = normal.nrows();
        let eig = SymmetricEigen::new(normal.clone());
        let max_eig = eig.eigenvalues.amax();
        let floor = 1e-10 * max_eig.max(f64::MIN_POSITIVE);
        let null: Vec<usize> = (0..unknowns)
            .filter(|&i| eig.eigenvalues[i] <= floor)
            .collect();
        if !null.is_empty() {
            let directions = null
                .iter()
                .map(|&i| {
                    let v = eig.eigenvectors.column(i);
                    v.iter()
                        .enumerate()
                        .filter(|(_, c)| c.abs() > 0.1)
                        .map(|(j, c)| format!("{c:+.3}·{}", self.layout.name(j)))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            return Err(EstimationError::RankDeficient {
                rank: unknowns - null.len(),
                unknowns,
                directions,
            });
        }
        let y = normal.cholesky().map(|c| c.solve(&rhs)).ok_or_else(|| {
            EstimationError::RankDeficient {
                rank: unknowns,
                unknowns,
                directions: vec!["normal matrix not positive definite".into()],
            }
        })?;
        let d = self.layout.dim;
        let relaxed = DMatrix::from_column_slice(d, d, y.rows(0, d * d).as_slice());
        let rotation = nearest_rotation(&relaxed);
        let t = y.rows(self.layout.translation.start, d).into_owned();
        let pose = Pose::new(RotationParam::from_matrix(&rotation)?, t)?;
        Ok(CwlsSolution {
            y,
            relaxed_rotation: relaxed,
            pose,
        })
    }
}

/// Closest proper rotation in Frobenius norm.
pub(crate) fn nearest_rotation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = DMatrix::identity(d, d);
    if (&u * &v_t).determinant() < 0.0 {
        fix[(d - 1, d - 1)] = -1.0;
    }
    u * fix * v_t
}

fn default_weights(n: usize, sigma: f64) -> DMatrix<f64> {
    let scale = if sigma > 0.0 {
        1.0 / (sigma * sigma)
    } else {
        1.0
    };
    DMatrix::identity(n, n) * scale
}

/// Stage-1 pose from a range matrix.
pub(crate) fn cwls_pose(
    ranges: &DMatrix<f64>,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    weights: Option<DMatrix<f64>>,
) -> Result<Pose> {
    let sys = CwlsSystem::build(ranges, anchors.positions(), template.nodes(), weights)?;
    Ok(sys.solve()?.pose)
}

/// Closed-form weighted least squares followed by Gauss–Newton refinement.
///
/// `weights` defaults to `I/σ²` with `σ` taken from the observation noise
/// (identity when `σ = 0`). If the refinement fails to converge and ends
/// worse than the closed-form pose, the closed-form pose is returned
/// flagged [`ResultFlag::Unrefined`].
pub fn range_rbl_cwls(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    weights: Option<DMatrix<f64>>,
    opts: &GaussNewtonOptions,
) -> Result<EstimationResult> {
    if !matches!(obs.model, MeasurementModel::Range) {
        return Err(EstimationError::InvalidInput(format!(
            "range estimator given {} observations",
            obs.modality().name()
        )));
    }
    check_rbl_inputs(obs, anchors, template)?;
    let weights = weights.unwrap_or_else(|| default_weights(obs.values.len(), obs.noise.sigma));
    let stage1 = cwls_pose(&obs.values, anchors, template, Some(weights))?;

    let problem = pose_problem(obs, anchors, template);
    let start = stage1.to_params();
    let refined = gauss_newton(&problem, &start, opts);
    if refined.converged {
        return result_from_solution(&problem, template, &refined, Vec::new());
    }
    let stage1_objective = problem.residuals(&start).norm_squared();
    if refined.objective.is_finite() && refined.objective <= stage1_objective {
        return result_from_solution(&problem, template, &refined, Vec::new());
    }
    let unrefined = Solution {
        params: start,
        objective: stage1_objective,
        gradient_norm: f64::NAN,
        iterations: 0,
        converged: false,
        termination: Termination::NonFinite,
        trace: vec![stage1_objective],
    };
    result_from_solution(&problem, template, &unrefined, vec![ResultFlag::Unrefined])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_pose;
    use crate::measurement::{gen_range, NoiseSpec};

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
        AnchorSet::from_rows(
            "a",
            2,
            &[
                vec![0.0, 0.0],
                vec![10.0, 0.0],
                vec![10.0, 10.0],
                vec![0.0, 10.0],
            ],
        )
        .unwrap()
    }

    #[test]
    fn layout_names() {
        let l = UnknownLayout::new(2);
        assert_eq!(l.len(), 9);
        let names: Vec<String> = (0..9).map(|i| l.name(i)).collect();
        assert_eq!(
            names,
            ["Q[0,0]", "Q[1,0]", "Q[0,1]", "Q[1,1]", "t[0]", "t[1]", "u[0]", "u[1]", "w"]
        );
    }

    #[test]
    fn stage_one_is_exact_without_noise() {
        let truth = Pose::planar(0.8, 3.0, 6.0).unwrap();
        let body = apply_pose(&square(), &truth).unwrap();
        let obs = gen_range(&body, &anchors(), &NoiseSpec::gaussian(0.0), 0).unwrap();
        let sys =
            CwlsSystem::build(&obs.values, anchors().positions(), square().nodes(), None).unwrap();
        let sol = sys.solve().unwrap();
        assert!((sol.relaxed_rotation - truth.rotation_matrix()).amax() < 1e-9);
        assert!((sol.pose.translation() - truth.translation()).norm() < 1e-9);
        let u = truth.rotation_matrix().transpose() * truth.translation();
        assert!((sol.y.rows(6, 2) - u).norm() < 1e-9);
        assert!((sol.y[8] - truth.translation().norm_squared()).abs() < 1e-8);
        assert!(sys.cost(&sol.y) < 1e-14);
    }

    #[test]
    fn zero_noise_full_pipeline() {
        let truth = Pose::planar(-2.2, 7.0, 2.5).unwrap();
        let body = apply_pose(&square(), &truth).unwrap();
        let obs = gen_range(&body, &anchors(), &NoiseSpec::gaussian(0.0), 0).unwrap();
        let r = range_rbl_cwls(
            &obs,
            &anchors(),
            &square(),
            None,
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        let p = r.pose.unwrap();
        assert!(r.converged);
        assert!((p.rotation().angles()[0] + 2.2).abs() < 1e-6);
        assert!((p.translation() - truth.translation()).norm() < 1e-6);
    }

    #[test]
    fn collinear_template_is_rank_deficient() {
        let line = RigidBodyTemplate::from_rows(
            2,
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]],
            "line",
        )
        .unwrap();
        let body = apply_pose(&line, &Pose::planar(0.3, 4.0, 4.0).unwrap()).unwrap();
        let obs = gen_range(&body, &anchors(), &NoiseSpec::gaussian(0.0), 0).unwrap();
        let err = range_rbl_cwls(
            &obs,
            &anchors(),
            &line,
            None,
            &GaussNewtonOptions::default(),
        )
        .unwrap_err();
        match err {
            EstimationError::RankDeficient {
                rank,
                unknowns,
                directions,
            } => {
                assert_eq!(unknowns, 9);
                // nodes have no y-extent: Q's second column and u[1] are unseen
                assert_eq!(rank, 6);
                assert_eq!(directions.len(), 3);
                let all = directions.join(" ");
                for name in ["Q[0,1]", "Q[1,1]", "u[1]"] {
                    assert!(all.contains(name), "{all}");
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn three_dimensional_recovery() {
        let template = RigidBodyTemplate::from_rows(
            3,
            &[
                vec![0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            "tet",
        )
        .unwrap();
        let anchors = AnchorSet::from_rows(
            "a",
            3,
            &[
                vec![0.0, 0.0, 0.0],
                vec![10.0, 0.0, 0.0],
                vec![0.0, 10.0, 0.0],
                vec![0.0, 0.0, 10.0],
                vec![10.0, 10.0, 10.0],
            ],
        )
        .unwrap();
        let truth = Pose::new(
            RotationParam::new(vec![0.4, -0.3, 1.0]).unwrap(),
            DVector::from_vec(vec![3.0, 4.0, 5.0]),
        )
        .unwrap();
        let body = apply_pose(&template, &truth).unwrap();
        let obs = gen_range(&body, &anchors, &NoiseSpec::gaussian(0.0), 0).unwrap();
        let r = range_rbl_cwls(
            &obs,
            &anchors,
            &template,
            None,
            &GaussNewtonOptions::default(),
        )
        .unwrap();
        let p = r.pose.unwrap();
        assert!((p.rotation_matrix() - truth.rotation_matrix()).amax() < 1e-6);
        assert!((p.translation() - truth.translation()).norm() < 1e-6);
    }

    #[test]
    fn nearest_rotation_is_proper() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, -0.9]);
        let r = nearest_rotation(&m);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r.transpose() * &r - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
