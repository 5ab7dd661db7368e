//! Soft-connected rigid bodies: several templates posed jointly, coupled by
//! bounded inter-body constraints enforced through squared-hinge penalties.
//!
//! The two-body block model generalises to any number of bodies `B`; the
//! block-diagonal extension beyond `B = 2` is a straightforward extrapolation.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::estimators::solver::{
    covariance_estimate, gauss_newton, GaussNewtonOptions, LeastSquaresProblem,
};
use crate::estimators::{
    rbl_estimate, rbl_refine, EstimationError, EstimationResult, PoseProblem, Result, ResultFlag,
};
use crate::geometry::{
    apply_pose, wrap_angle, GeometryError, Pose, RigidBodyTemplate, RotationParam,
};
use crate::measurement::{AnchorSet, ObservationSet};

/// `B` templates with one pose each.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBodyModel {
    bodies: Vec<RigidBodyTemplate>,
    poses: Vec<Pose>,
}

impl MultiBodyModel {
    pub fn new(
        bodies: Vec<RigidBodyTemplate>,
        poses: Vec<Pose>,
    ) -> std::result::Result<Self, GeometryError> {
        if bodies.is_empty() {
            return Err(GeometryError::InvalidParameter(
                "a multi-body model needs at least one body".into(),
            ));
        }
        if bodies.len() != poses.len() {
            return Err(GeometryError::InvalidParameter(format!(
                "{} bodies but {} poses",
                bodies.len(),
                poses.len()
            )));
        }
        let d = bodies[0].dim();
        for (b, p) in bodies.iter().zip(&poses) {
            if b.dim() != d {
                return Err(GeometryError::DimensionMismatch {
                    expected: d,
                    found: b.dim(),
                });
            }
            if p.dim() != d {
                return Err(GeometryError::DimensionMismatch {
                    expected: d,
                    found: p.dim(),
                });
            }
        }
        Ok(Self { bodies, poses })
    }

    pub fn dim(&self) -> usize {
        self.bodies[0].dim()
    }

    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bodies(&self) -> &[RigidBodyTemplate] {
        &self.bodies
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn node_count(&self) -> usize {
        self.bodies.iter().map(RigidBodyTemplate::len).sum()
    }
}

/// All node positions as one block product:
///
/// ```text
/// S = [Q_1 | … | Q_B] · blkdiag(C_1, …, C_B) + [t_1 | … | t_B] · blkdiag(1ᵀ_K1, …, 1ᵀ_KB)
/// ```
pub fn apply_multi_pose(model: &MultiBodyModel) -> DMatrix<f64> {
    let d = model.dim();
    let b = model.len();
    let n = model.node_count();
    let mut rot = DMatrix::zeros(d, d * b);
    let mut trans = DMatrix::zeros(d, b);
    let mut shapes = DMatrix::zeros(d * b, n);
    let mut ones = DMatrix::zeros(b, n);
    let mut col = 0;
    for (i, (body, pose)) in model.bodies.iter().zip(&model.poses).enumerate() {
        let k = body.len();
        rot.view_mut((0, i * d), (d, d))
            .copy_from(&pose.rotation_matrix());
        trans.set_column(i, pose.translation());
        shapes
            .view_mut((i * d, col), (d, k))
            .copy_from(body.nodes());
        ones.view_mut((i, col), (1, k)).fill(1.0);
        col += k;
    }
    rot * shapes + trans * ones
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Distance between one reference point on each body.
    InterBodyDistance,
    /// Wrapped difference `α_j − α_i` of the planar rotation angles.
    RelativeAngle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePoints {
    #[default]
    Centroids,
    /// Node `[on body i, on body j]`.
    Nodes([usize; 2]),
}

/// `lower ≤ v ≤ upper` on a quantity `v` linking bodies `i` and `j`,
/// penalised by `weight · max(0, lower − v, v − upper)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftConstraint {
    pub kind: ConstraintKind,
    pub body_pair: (usize, usize),
    #[serde(default)]
    pub reference_points: ReferencePoints,
    pub lower: f64,
    pub upper: f64,
    pub weight: f64,
}

impl SoftConstraint {
    pub fn distance(i: usize, j: usize, lower: f64, upper: f64, weight: f64) -> Self {
        Self {
            kind: ConstraintKind::InterBodyDistance,
            body_pair: (i, j),
            reference_points: ReferencePoints::Centroids,
            lower,
            upper,
            weight,
        }
    }

    pub fn relative_angle(i: usize, j: usize, lower: f64, upper: f64, weight: f64) -> Self {
        Self {
            kind: ConstraintKind::RelativeAngle,
            body_pair: (i, j),
            reference_points: ReferencePoints::Centroids,
            lower,
            upper,
            weight,
        }
    }

    pub fn with_nodes(mut self, node_i: usize, node_j: usize) -> Self {
        self.reference_points = ReferencePoints::Nodes([node_i, node_j]);
        self
    }

    /// Checks bounds, weight and indices against the bodies.
    pub fn validate(&self, bodies: &[RigidBodyTemplate]) -> Result<()> {
        let (i, j) = self.body_pair;
        let invalid = |msg: String| Err(EstimationError::InvalidInput(msg));
        if i >= bodies.len() || j >= bodies.len() {
            return invalid(format!(
                "constraint on bodies ({i}, {j}) but only {} bodies",
                bodies.len()
            ));
        }
        if i == j {
            return invalid(format!("constraint links body {i} to itself"));
        }
        if self.lower.is_nan() || self.upper.is_nan() || self.lower > self.upper {
            return invalid(format!(
                "constraint bounds [{}, {}] are not ordered",
                self.lower, self.upper
            ));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return invalid(format!(
                "constraint weight must be finite and ≥ 0, got {}",
                self.weight
            ));
        }
        match self.kind {
            ConstraintKind::RelativeAngle => {
                if bodies[i].dim() != 2 {
                    return invalid("relative-angle constraints are 2D only".into());
                }
                if self.reference_points != ReferencePoints::Centroids {
                    return invalid("relative-angle constraints take no reference nodes".into());
                }
            }
            ConstraintKind::InterBodyDistance => {
                if self.lower < 0.0 {
                    return invalid(format!("distance lower bound {} is negative", self.lower));
                }
                if let ReferencePoints::Nodes([a, b]) = self.reference_points {
                    if a >= bodies[i].len() || b >= bodies[j].len() {
                        return invalid(format!("reference nodes ({a}, {b}) out of range"));
                    }
                }
            }
        }
        Ok(())
    }

    fn local_points(&self, bodies: &[RigidBodyTemplate]) -> (DVector<f64>, DVector<f64>) {
        let (i, j) = self.body_pair;
        match self.reference_points {
            ReferencePoints::Centroids => (bodies[i].centroid(), bodies[j].centroid()),
            ReferencePoints::Nodes([a, b]) => (
                bodies[i].nodes().column(a).into_owned(),
                bodies[j].nodes().column(b).into_owned(),
            ),
        }
    }

    pub fn violation(&self, value: f64) -> f64 {
        (self.lower - value).max(value - self.upper).max(0.0)
    }
}

/// Constrained quantity `v` for the model's current poses.
pub fn constraint_value(model: &MultiBodyModel, c: &SoftConstraint) -> Result<f64> {
    c.validate(model.bodies())?;
    let (i, j) = c.body_pair;
    Ok(match c.kind {
        ConstraintKind::RelativeAngle => wrap_angle(
            model.poses[j].rotation().angles()[0] - model.poses[i].rotation().angles()[0],
        ),
        ConstraintKind::InterBodyDistance => {
            let (pi, pj) = c.local_points(model.bodies());
            (model.poses[i].transform_point(&pi) - model.poses[j].transform_point(&pj)).norm()
        }
    })
}

/// `Σ weight · violation²`; zero exactly on the feasible set.
pub fn penalty(model: &MultiBodyModel, constraints: &[SoftConstraint]) -> Result<f64> {
    constraints.iter().try_fold(0.0, |acc, c| {
        let v = constraint_value(model, c)?;
        Ok(acc + c.weight * c.violation(v).powi(2))
    })
}

/// One body's data for joint estimation.
#[derive(Debug, Clone, Copy)]
pub struct BodyData<'a> {
    pub template: &'a RigidBodyTemplate,
    pub obs: &'a ObservationSet,
    pub anchors: &'a AnchorSet,
    /// Starting pose; otherwise the body's own RBL estimate is used.
    pub init: Option<&'a Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOptions {
    pub solver: GaussNewtonOptions,
    /// Outer penalty rounds.
    pub rounds: usize,
    /// Weight multiplier between rounds.
    pub ramp: f64,
    /// Ring positions tried when seeding a body from its constraints.
    pub seed_starts: usize,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            solver: GaussNewtonOptions::default(),
            rounds: 5,
            ramp: 10.0,
            seed_starts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub index: usize,
    pub kind: ConstraintKind,
    pub body_pair: (usize, usize),
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub violation: f64,
    /// Weight after ramping.
    pub final_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingReport {
    pub constraints: Vec<ConstraintReport>,
    /// Penalty at the returned poses with the unramped weights.
    pub penalty: f64,
    pub rounds: usize,
    pub fallback_bodies: Vec<usize>,
    pub seeded_bodies: Vec<usize>,
}

impl CouplingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone)]
pub struct JointEstimate {
    pub results: Vec<EstimationResult>,
    pub coupling: CouplingReport,
}

impl JointEstimate {
    pub fn poses(&self) -> Vec<Pose> {
        self.results
            .iter()
            .map(|r| r.pose.clone().expect("rigid results carry a pose"))
            .collect()
    }
}

/// A constraint restricted to one connected component, in local body indices.
#[derive(Debug, Clone)]
struct Link {
    kind: ConstraintKind,
    a: usize,
    b: usize,
    pa: DVector<f64>,
    pb: DVector<f64>,
    lower: f64,
    upper: f64,
    weight: f64,
}

/// Value of a link and its gradient with respect to each body's parameters.
fn link_value(link: &Link, xa: &[f64], xb: &[f64], d: usize) -> (f64, DVector<f64>, DVector<f64>) {
    let na = RotationParam::angle_count(d);
    let p = na + d;
    match link.kind {
        ConstraintKind::RelativeAngle => {
            let mut ga = DVector::zeros(p);
            let mut gb = DVector::zeros(p);
            ga[0] = -1.0;
            gb[0] = 1.0;
            (wrap_angle(xb[0] - xa[0]), ga, gb)
        }
        ConstraintKind::InterBodyDistance => {
            let world = |x: &[f64], local: &DVector<f64>| {
                let rot = RotationParam::new(x[..na].to_vec()).expect("finite angles");
                let t = DVector::from_column_slice(&x[na..]);
                let point = rot.matrix() * local + t;
                let grads: Vec<DVector<f64>> =
                    rot.derivatives().iter().map(|dq| dq * local).collect();
                (point, grads)
            };
            let (wa, da) = world(xa, &link.pa);
            let (wb, db) = world(xb, &link.pb);
            let diff = wa - wb;
            let v = diff.norm();
            let u = if v > 0.0 { diff / v } else { DVector::zeros(d) };
            let mut ga = DVector::zeros(p);
            let mut gb = DVector::zeros(p);
            for a in 0..na {
                ga[a] = u.dot(&da[a]);
                gb[a] = -u.dot(&db[a]);
            }
            for i in 0..d {
                ga[na + i] = u[i];
                gb[na + i] = -u[i];
            }
            (v, ga, gb)
        }
    }
}

/// Stacked measurement residuals of every body plus `√(w·scale)·(v − clamp(v))`
/// for every link.
struct JointProblem<'a> {
    bodies: Vec<PoseProblem<'a>>,
    links: Vec<Link>,
    scale: f64,
    dim: usize,
}

impl JointProblem<'_> {
    fn block(&self) -> usize {
        Pose::param_count(self.dim)
    }

    fn slice<'p>(&self, params: &'p DVector<f64>, body: usize) -> &'p [f64] {
        let p = self.block();
        &params.as_slice()[body * p..(body + 1) * p]
    }

    fn measurement_rows(&self) -> usize {
        self.bodies.iter().map(PoseProblem::residual_count).sum()
    }

    fn body_cost(&self, params: &DVector<f64>, body: usize) -> f64 {
        let x = DVector::from_column_slice(self.slice(params, body));
        self.bodies[body].residuals(&x).norm_squared()
    }
}

impl LeastSquaresProblem for JointProblem<'_> {
    fn residuals(&self, params: &DVector<f64>) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.measurement_rows() + self.links.len());
        for (i, body) in self.bodies.iter().enumerate() {
            let x = DVector::from_column_slice(self.slice(params, i));
            out.extend(body.residuals(&x).iter());
        }
        for link in &self.links {
            let (v, _, _) = link_value(
                link,
                self.slice(params, link.a),
                self.slice(params, link.b),
                self.dim,
            );
            out.push((link.weight * self.scale).sqrt() * (v - v.clamp(link.lower, link.upper)));
        }
        DVector::from_vec(out)
    }

    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let p = self.block();
        let rows = self.measurement_rows();
        let mut jac = DMatrix::zeros(rows + self.links.len(), params.len());
        let mut row = 0;
        for (i, body) in self.bodies.iter().enumerate() {
            let x = DVector::from_column_slice(self.slice(params, i));
            let jb = body.jacobian(&x);
            jac.view_mut((row, i * p), jb.shape()).copy_from(&jb);
            row += jb.nrows();
        }
        for (l, link) in self.links.iter().enumerate() {
            let (v, ga, gb) = link_value(
                link,
                self.slice(params, link.a),
                self.slice(params, link.b),
                self.dim,
            );
            if v < link.lower || v > link.upper {
                let s = (link.weight * self.scale).sqrt();
                let mut r = jac.row_mut(rows + l);
                for c in 0..p {
                    r[link.a * p + c] += s * ga[c];
                    r[link.b * p + c] += s * gb[c];
                }
            }
        }
        jac
    }

    fn normalize(&self, params: &mut DVector<f64>) {
        let p = self.block();
        let na = RotationParam::angle_count(self.dim);
        for body in 0..self.bodies.len() {
            for a in 0..na {
                params[body * p + a] = wrap_angle(params[body * p + a]);
            }
        }
    }
}

fn components(n: usize, constraints: &[SoftConstraint]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for c in constraints.iter().filter(|c| c.weight > 0.0) {
        let (a, b) = (
            find(&mut parent, c.body_pair.0),
            find(&mut parent, c.body_pair.1),
        );
        parent[a.max(b)] = a.min(b);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_slot[r]].push(i);
    }
    groups
}

fn independent(body: &BodyData<'_>, opts: &GaussNewtonOptions) -> Result<EstimationResult> {
    match body.init {
        Some(p) => rbl_refine(body.obs, body.anchors, body.template, p, opts),
        None => rbl_estimate(body.obs, body.anchors, body.template, None, opts),
    }
}

/// Candidate poses for an unplaced body `j` around a placed neighbour,
/// consistent with the links between them.
fn ring_candidates(
    problem: &JointProblem<'_>,
    params: &DVector<f64>,
    j: usize,
    placed: &[bool],
    starts: usize,
) -> Vec<DVector<f64>> {
    let d = problem.dim;
    let na = RotationParam::angle_count(d);
    let links: Vec<&Link> = problem
        .links
        .iter()
        .filter(|l| (l.a == j && placed[l.b]) || (l.b == j && placed[l.a]))
        .collect();
    let Some(first) = links.first() else {
        return Vec::new();
    };
    let i = if first.a == j { first.b } else { first.a };
    let xi = problem.slice(params, i);
    let anchor_pose = Pose::from_params(d, xi).expect("finite pose");

    let angles: Vec<Vec<f64>> = if d == 2 {
        let rel = links
            .iter()
            .find(|l| l.kind == ConstraintKind::RelativeAngle && (l.a == i || l.b == i));
        match rel {
            Some(l) => {
                let mid = mid_bound(l.lower, l.upper, 0.0);
                let sign = if l.a == i { 1.0 } else { -1.0 };
                vec![vec![wrap_angle(xi[0] + sign * mid)]]
            }
            None => (0..4)
                .map(|q| vec![wrap_angle(xi[0] + q as f64 * PI / 2.0)])
                .collect(),
        }
    } else {
        vec![xi[..na].to_vec()]
    };
    let dist = links
        .iter()
        .find(|l| l.kind == ConstraintKind::InterBodyDistance && (l.a == i || l.b == i));
    let (centre, local_j, radius) = match dist {
        Some(l) => {
            let (pi, pj) = if l.a == i {
                (&l.pa, &l.pb)
            } else {
                (&l.pb, &l.pa)
            };
            (
                anchor_pose.transform_point(pi),
                pj.clone(),
                mid_bound(l.lower, l.upper, 1.0),
            )
        }
        None => (anchor_pose.translation().clone(), DVector::zeros(d), 0.0),
    };
    let directions: Vec<DVector<f64>> = if d == 2 {
        (0..starts.max(1))
            .map(|s| {
                let phi = TAU * s as f64 / starts.max(1) as f64;
                DVector::from_vec(vec![phi.cos(), phi.sin()])
            })
            .collect()
    } else {
        (0..2 * d)
            .map(|s| {
                let mut v = DVector::zeros(d);
                v[s / 2] = if s % 2 == 0 { 1.0 } else { -1.0 };
                v
            })
            .collect()
    };
    let p = problem.block();
    let mut out = Vec::new();
    for ang in &angles {
        let q = RotationParam::new(ang.clone()).expect("finite").matrix();
        for dir in &directions {
            let t = &centre + dir * radius - &q * &local_j;
            let mut x = params.clone();
            x.rows_mut(j * p, na).copy_from_slice(ang);
            x.rows_mut(j * p + na, d).copy_from(&t);
            out.push(x);
        }
    }
    out
}

fn mid_bound(lower: f64, upper: f64, fallback: f64) -> f64 {
    match (lower.is_finite(), upper.is_finite()) {
        (true, true) => 0.5 * (lower + upper),
        (true, false) => lower.max(fallback),
        (false, true) => upper.min(fallback),
        (false, false) => fallback,
    }
}

/// Partial objective: placed bodies' measurement cost plus links among them.
fn placed_cost(problem: &JointProblem<'_>, params: &DVector<f64>, placed: &[bool]) -> f64 {
    let mut cost = 0.0;
    for (i, &on) in placed.iter().enumerate() {
        if on {
            cost += problem.body_cost(params, i);
        }
    }
    for link in problem.links.iter().filter(|l| placed[l.a] && placed[l.b]) {
        let (v, _, _) = link_value(
            link,
            problem.slice(params, link.a),
            problem.slice(params, link.b),
            problem.dim,
        );
        cost += link.weight * (v - v.clamp(link.lower, link.upper)).powi(2);
    }
    cost
}

struct RampOutcome {
    params: DVector<f64>,
    objective: f64,
    gradient_norm: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn ramp(problem: &mut JointProblem<'_>, init: &DVector<f64>, opts: &JointOptions) -> RampOutcome {
    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut last = None;
    problem.scale = 1.0;
    for _ in 0..opts.rounds.max(1) {
        let sol = gauss_newton(&*problem, &params, &opts.solver);
        trace.extend(&sol.trace);
        iterations += sol.iterations;
        params = sol.params.clone();
        let finite = sol.objective.is_finite();
        last = Some(sol);
        if !finite {
            break;
        }
        problem.scale *= opts.ramp;
    }
    problem.scale /= opts.ramp;
    let sol = last.expect("at least one round");
    RampOutcome {
        params,
        objective: sol.objective,
        gradient_norm: sol.gradient_norm,
        iterations,
        converged: sol.converged,
        trace,
    }
}

/// Jointly estimates the poses of several bodies, minimising the summed
/// measurement cost plus the soft-constraint penalty.
///
/// Bodies linked by positive-weight constraints are solved together by
/// Gauss–Newton on their stacked parameters, with the penalty weights ramped
/// by `opts.ramp` over `opts.rounds` rounds. Each group starts from the
/// bodies' independent estimates; a body that cannot be estimated alone is
/// seeded from its constraints to an already placed neighbour. Bodies without
/// active constraints get their independent estimate unchanged.
pub fn joint_estimate_soft(
    bodies: &[BodyData<'_>],
    constraints: &[SoftConstraint],
    opts: &JointOptions,
) -> Result<JointEstimate> {
    if bodies.is_empty() {
        return Err(EstimationError::InvalidInput(
            "joint estimation needs at least one body".into(),
        ));
    }
    let templates: Vec<RigidBodyTemplate> = bodies.iter().map(|b| b.template.clone()).collect();
    let d = templates[0].dim();
    if let Some(t) = templates.iter().find(|t| t.dim() != d) {
        return Err(EstimationError::InvalidInput(format!(
            "bodies mix {d}D and {}D templates",
            t.dim()
        )));
    }
    for c in constraints {
        c.validate(&templates)?;
    }

    let alone: Vec<Result<EstimationResult>> = bodies
        .iter()
        .map(|b| independent(b, &opts.solver))
        .collect();
    let mut results: Vec<Option<EstimationResult>> = vec![None; bodies.len()];
    let mut fallback_bodies = Vec::new();
    let mut seeded_bodies = Vec::new();
    let mut rounds = 0;

    for group in components(bodies.len(), constraints) {
        if group.len() == 1 {
            let i = group[0];
            results[i] = Some(alone[i].clone()?);
            continue;
        }
        let local: Vec<Option<usize>> = (0..bodies.len())
            .map(|i| group.iter().position(|&g| g == i))
            .collect();
        let links: Vec<Link> = constraints
            .iter()
            .filter(|c| c.weight > 0.0 && local[c.body_pair.0].is_some())
            .map(|c| {
                let (pa, pb) = c.local_points(&templates);
                Link {
                    kind: c.kind,
                    a: local[c.body_pair.0].expect("in group"),
                    b: local[c.body_pair.1].expect("in group"),
                    pa,
                    pb,
                    lower: c.lower,
                    upper: c.upper,
                    weight: c.weight,
                }
            })
            .collect();
        for &g in &group {
            crate::estimators::check_body_shapes(
                bodies[g].obs,
                bodies[g].anchors,
                bodies[g].template,
            )?;
        }
        let mut problem = JointProblem {
            bodies: group
                .iter()
                .map(|&g| PoseProblem {
                    model: &bodies[g].obs.model,
                    values: &bodies[g].obs.values,
                    anchors: bodies[g].anchors.positions(),
                    template: bodies[g].template.nodes(),
                })
                .collect(),
            links,
            scale: 1.0,
            dim: d,
        };
        let p = Pose::param_count(d);
        let mut start = DVector::zeros(p * group.len());
        let mut placed = vec![false; group.len()];
        for (li, &g) in group.iter().enumerate() {
            if let Ok(r) = &alone[g] {
                let pose = r.pose.as_ref().expect("rigid result");
                start.rows_mut(li * p, p).copy_from(&pose.to_params());
                placed[li] = true;
            }
        }
        if !placed.iter().any(|&x| x) {
            return Err(alone[group[0]].clone().expect_err("no body placed"));
        }
        let unplaced = placed.iter().filter(|&&x| !x).count();
        let mut starts = vec![start];
        while placed.iter().any(|&x| !x) {
            let next = (0..group.len()).find(|&j| {
                !placed[j]
                    && problem
                        .links
                        .iter()
                        .any(|l| (l.a == j && placed[l.b]) || (l.b == j && placed[l.a]))
            });
            let Some(j) = next else {
                let stuck = group[placed.iter().position(|&x| !x).expect("unplaced")];
                return Err(alone[stuck]
                    .clone()
                    .expect_err("unplaced body failed alone"));
            };
            let mut mask = placed.clone();
            mask[j] = true;
            let mut scored: Vec<(f64, DVector<f64>)> =
                ring_candidates(&problem, &starts[0], j, &placed, opts.seed_starts)
                    .into_iter()
                    .map(|x| (placed_cost(&problem, &x, &mask), x))
                    .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            starts = if unplaced == 1 {
                scored.into_iter().take(3).map(|(_, x)| x).collect()
            } else {
                vec![scored.swap_remove(0).1]
            };
            placed[j] = true;
            seeded_bodies.push(group[j]);
        }

        let mut best: Option<RampOutcome> = None;
        for s in &starts {
            let out = ramp(&mut problem, s, opts);
            if best.as_ref().is_none_or(|b| {
                out.objective.is_finite()
                    && (!b.objective.is_finite() || out.objective < b.objective)
            }) {
                best = Some(out);
            }
        }
        let out = best.expect("at least one start");
        rounds = rounds.max(opts.rounds.max(1));

        let diverged = !out.objective.is_finite() || out.params.iter().any(|v| !v.is_finite());
        for (li, &g) in group.iter().enumerate() {
            if diverged {
                let mut r = alone[g].clone()?;
                r.flags.push(ResultFlag::IndependentFallback);
                fallback_bodies.push(g);
                results[g] = Some(r);
                continue;
            }
            let x = DVector::from_column_slice(problem.slice(&out.params, li));
            let pose = Pose::from_params(d, x.as_slice())?;
            let cost = problem.body_cost(&out.params, li);
            let mut flags = Vec::new();
            if alone[g].is_err() {
                flags.push(ResultFlag::SeededFromConstraints);
            }
            results[g] = Some(EstimationResult {
                node_positions: apply_pose(bodies[g].template, &pose)?.positions,
                pose: Some(pose),
                objective: cost,
                iterations: out.iterations,
                converged: out.converged,
                gradient_norm: out.gradient_norm,
                covariance_est: covariance_estimate(&problem.bodies[li], &x, cost),
                objective_trace: out.trace.clone(),
                flags,
            });
        }
    }

    let results: Vec<EstimationResult> = results
        .into_iter()
        .map(|r| r.expect("every body solved"))
        .collect();
    let model = MultiBodyModel::new(
        templates.clone(),
        results
            .iter()
            .map(|r| r.pose.clone().expect("rigid result"))
            .collect(),
    )?;
    let ramp_factor = opts.ramp.powi(opts.rounds.max(1) as i32 - 1);
    let mut reports = Vec::with_capacity(constraints.len());
    let mut total = 0.0;
    for (index, c) in constraints.iter().enumerate() {
        let value = constraint_value(&model, c)?;
        let violation = c.violation(value);
        total += c.weight * violation * violation;
        reports.push(ConstraintReport {
            index,
            kind: c.kind,
            body_pair: c.body_pair,
            value,
            lower: c.lower,
            upper: c.upper,
            violation,
            final_weight: c.weight * ramp_factor,
        });
    }
    seeded_bodies.sort_unstable();
    fallback_bodies.sort_unstable();
    Ok(JointEstimate {
        results,
        coupling: CouplingReport {
            constraints: reports,
            penalty: total,
            rounds,
            fallback_bodies,
            seeded_bodies,
        },
    })
}

/// `T` observation frames of one body with bounds on its motion between
/// consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSequence {
    pub frames: Vec<ObservationSet>,
    /// Centroid displacement bounds per step.
    pub min_translation: f64,
    pub max_translation: f64,
    /// Largest rotation per step (2D only).
    pub max_rotation: f64,
    /// Penalty weight of each motion constraint.
    pub weight: f64,
}

impl TrackingSequence {
    pub fn new(frames: Vec<ObservationSet>, max_translation: f64, max_rotation: f64) -> Self {
        Self {
            frames,
            min_translation: 0.0,
            max_translation,
            max_rotation,
            weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(EstimationError::InvalidInput(
                "tracking needs at least one frame".into(),
            ));
        }
        let ok = self.min_translation >= 0.0
            && self.max_translation >= self.min_translation
            && self.max_rotation >= 0.0
            && self.weight >= 0.0
            && self.weight.is_finite();
        if !ok {
            return Err(EstimationError::InvalidInput(format!(
                "motion bounds must satisfy 0 ≤ min ≤ max and weight ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Step constraints between consecutive frames.
    pub fn constraints(&self, dim: usize) -> Vec<SoftConstraint> {
        let mut out = Vec::new();
        for t in 1..self.frames.len() {
            out.push(SoftConstraint::distance(
                t - 1,
                t,
                self.min_translation,
                self.max_translation,
                self.weight,
            ));
            if dim == 2 {
                out.push(SoftConstraint::relative_angle(
                    t - 1,
                    t,
                    -self.max_rotation,
                    self.max_rotation,
                    self.weight,
                ));
            }
        }
        out
    }
}

/// Smooths a pose track by treating each frame as a body softly connected to
/// its neighbours in time. Results are in frame order.
pub fn track_sequence(
    seq: &TrackingSequence,
    anchors: &AnchorSet,
    template: &RigidBodyTemplate,
    opts: &JointOptions,
) -> Result<JointEstimate> {
    seq.validate()?;
    let bodies: Vec<BodyData<'_>> = seq
        .frames
        .iter()
        .map(|obs| BodyData {
            template,
            obs,
            anchors,
            init: None,
        })
        .collect();
    joint_estimate_soft(&bodies, &seq.constraints(template.dim()), opts)
}
