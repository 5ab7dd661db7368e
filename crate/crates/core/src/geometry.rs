//! Rigid-body geometry: rotations, the affine body transform, distance
//! matrices, classical MDS and Procrustes alignment.
//!
//! Node coordinates are stored column-wise in `d×K` matrices, one column per
//! node, `d ∈ {2, 3}`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("nodes {0} and {1} coincide")]
    DuplicateNodes(usize, usize),
    #[error("distance matrix invalid: {0}")]
    InvalidDistanceMatrix(String),
    #[error("distances not embeddable in {dim} dimensions: Gram eigenvalue {eigenvalue:.3e} below tolerance {tolerance:.3e}")]
    NotEmbeddable {
        dim: usize,
        eigenvalue: f64,
        tolerance: f64,
    },
    #[error("template rank {rank} is below the {required} needed to fix a rotation")]
    RankDeficient { rank: usize, required: usize },
    #[error("template JSON: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Reduces an angle to `(−π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let w = angle.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(GeometryError::InvalidParameter(format!(
            "dimension must be 2 or 3, got {dim}"
        )))
    }
}

/// Rotation angles: `[α]` in 2D, `[α, β, γ]` (Z-Y-X intrinsic) in 3D.
///
/// Angles are wrapped to `(−π, π]` on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RotationParam {
    angles: Vec<f64>,
}

impl TryFrom<Vec<f64>> for RotationParam {
    type Error = GeometryError;

    fn try_from(angles: Vec<f64>) -> Result<Self> {
        Self::new(angles)
    }
}

impl From<RotationParam> for Vec<f64> {
    fn from(r: RotationParam) -> Self {
        r.angles
    }
}

fn rot_z(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}

fn rot_y(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c])
}

fn rot_x(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c])
}

fn d_rot_z(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0])
}

fn d_rot_y(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s])
}

fn d_rot_x(a: f64) -> DMatrix<f64> {
    let (s, c) = a.sin_cos();
    DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s])
}

impl RotationParam {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.len() != 1 && angles.len() != 3 {
            return Err(GeometryError::InvalidParameter(format!(
                "expected 1 (2D) or 3 (3D) rotation angles, got {}",
                angles.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(GeometryError::InvalidParameter(
                "rotation angle is not finite".into(),
            ));
        }
        Ok(Self {
            angles: angles.into_iter().map(wrap_angle).collect(),
        })
    }

    pub fn planar(alpha: f64) -> Result<Self> {
        Self::new(vec![alpha])
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Self::new(vec![0.0; Self::angle_count(dim)])
    }

    /// Number of angles parameterising a rotation in `dim` dimensions.
    pub fn angle_count(dim: usize) -> usize {
        if dim == 2 {
            1
        } else {
            3
        }
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn dim(&self) -> usize {
        if self.angles.len() == 1 {
            2
        } else {
            3
        }
    }

    /// The `d×d` proper rotation matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        match self.angles.as_slice() {
            [a] => {
                let (s, c) = a.sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            [a, b, g] => rot_z(*a) * rot_y(*b) * rot_x(*g),
            _ => unreachable!("angle count validated on construction"),
        }
    }

    /// Partial derivatives of [`RotationParam::matrix`] with respect to each angle.
    pub fn derivatives(&self) -> Vec<DMatrix<f64>> {
        match self.angles.as_slice() {
            [a] => {
                let (s, c) = a.sin_cos();
                vec![DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s])]
            }
            [a, b, g] => {
                let (z, y, x) = (rot_z(*a), rot_y(*b), rot_x(*g));
                vec![
                    d_rot_z(*a) * &y * &x,
                    &z * d_rot_y(*b) * &x,
                    &z * &y * d_rot_x(*g),
                ]
            }
            _ => unreachable!("angle count validated on construction"),
        }
    }

    /// Recovers angles from a proper rotation matrix.
    ///
    /// 3D angles are not unique; the returned set has `β ∈ [−π/2, π/2]` and
    /// `γ = 0` at gimbal lock.
    pub fn from_matrix(q: &DMatrix<f64>) -> Result<Self> {
        match (q.nrows(), q.ncols()) {
            (2, 2) => Self::new(vec![q[(1, 0)].atan2(q[(0, 0)])]),
            (3, 3) => {
                let sb = (-q[(2, 0)]).clamp(-1.0, 1.0);
                let beta = sb.asin();
                if sb.abs() > 1.0 - 1e-12 {
                    let alpha = (-q[(0, 1)]).atan2(q[(1, 1)]);
                    Self::new(vec![alpha, beta, 0.0])
                } else {
                    let alpha = q[(1, 0)].atan2(q[(0, 0)]);
                    let gamma = q[(2, 1)].atan2(q[(2, 2)]);
                    Self::new(vec![alpha, beta, gamma])
                }
            }
            (r, _) => Err(GeometryError::InvalidParameter(format!(
                "rotation matrix must be 2×2 or 3×3, got {r}×{}",
                q.ncols()
            ))),
        }
    }
}

/// Rotation matrix of a parameter set (free-function form).
pub fn rotation_matrix(param: &RotationParam) -> DMatrix<f64> {
    param.matrix()
}

/// Rotation plus translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseDoc", into = "PoseDoc")]
pub struct Pose {
    rotation: RotationParam,
    translation: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    angles: Vec<f64>,
    translation: Vec<f64>,
}

impl TryFrom<PoseDoc> for Pose {
    type Error = GeometryError;

    fn try_from(doc: PoseDoc) -> Result<Self> {
        Pose::new(
            RotationParam::new(doc.angles)?,
            DVector::from_vec(doc.translation),
        )
    }
}

impl From<Pose> for PoseDoc {
    fn from(p: Pose) -> Self {
        PoseDoc {
            angles: p.rotation.angles,
            translation: p.translation.iter().copied().collect(),
        }
    }
}

impl Pose {
    pub fn new(rotation: RotationParam, translation: DVector<f64>) -> Result<Self> {
        if translation.len() != rotation.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: rotation.dim(),
                found: translation.len(),
            });
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn planar(alpha: f64, tx: f64, ty: f64) -> Result<Self> {
        Self::new(
            RotationParam::planar(alpha)?,
            DVector::from_vec(vec![tx, ty]),
        )
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(RotationParam::identity(dim)?, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn rotation(&self) -> &RotationParam {
        &self.rotation
    }

    pub fn translation(&self) -> &DVector<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        self.rotation.matrix()
    }

    /// Number of scalar pose parameters (angles then translation).
    pub fn param_count(dim: usize) -> usize {
        RotationParam::angle_count(dim) + dim
    }

    /// Flattens to `[angles…, t…]`.
    pub fn to_params(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rotation.angles.len() + self.translation.len(),
            self.rotation
                .angles
                .iter()
                .chain(self.translation.iter())
                .copied(),
        )
    }

    pub fn from_params(dim: usize, params: &[f64]) -> Result<Self> {
        check_dim(dim)?;
        let na = RotationParam::angle_count(dim);
        if params.len() != na + dim {
            return Err(GeometryError::DimensionMismatch {
                expected: na + dim,
                found: params.len(),
            });
        }
        Self::new(
            RotationParam::new(params[..na].to_vec())?,
            DVector::from_row_slice(&params[na..]),
        )
    }

    /// Maps a template-frame point into the world frame.
    pub fn transform_point(&self, point: &DVector<f64>) -> DVector<f64> {
        self.rotation_matrix() * point + &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        let q = self.rotation_matrix() * other.rotation_matrix();
        Pose::new(
            RotationParam::from_matrix(&q)?,
            self.rotation_matrix() * &other.translation + &self.translation,
        )
    }
}

/// Node coordinates of a rigid body in its own reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyTemplate {
    nodes: DMatrix<f64>,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct TemplateDoc {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    #[serde(default)]
    label: String,
}

impl Serialize for RigidBodyTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TemplateDoc {
            dim: self.dim(),
            nodes: matrix_to_rows(&self.nodes),
            label: self.label.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidBodyTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = TemplateDoc::deserialize(d)?;
        let nodes = rows_to_matrix(doc.dim, &doc.nodes).map_err(serde::de::Error::custom)?;
        RigidBodyTemplate::new(nodes, doc.label).map_err(serde::de::Error::custom)
    }
}

/// Converts a `d×K` column-per-node matrix to row-per-node vectors.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Inverse of [`matrix_to_rows`].
pub fn rows_to_matrix(dim: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(GeometryError::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(dim, rows.len(), |i, k| rows[k][i]))
}

impl RigidBodyTemplate {
    pub fn new(nodes: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        check_dim(nodes.nrows())?;
        if nodes.ncols() == 0 {
            return Err(GeometryError::InvalidParameter(
                "template needs at least one node".into(),
            ));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("template nodes"));
        }
        let k = nodes.ncols();
        for i in 0..k {
            for j in i + 1..k {
                if nodes.column(i) == nodes.column(j) {
                    return Err(GeometryError::DuplicateNodes(i, j));
                }
            }
        }
        Ok(Self {
            nodes,
            label: label.into(),
        })
    }

    /// Builds a template from row-per-node coordinates.
    pub fn from_rows(dim: usize, rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        Self::new(rows_to_matrix(dim, rows)?, label)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GeometryError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serialises")
    }

    pub fn dim(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn len(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn centroid(&self) -> DVector<f64> {
        self.nodes.column_mean()
    }

    /// Copy translated so the centroid sits at the origin.
    pub fn centered(&self) -> Self {
        let c = self.centroid();
        let mut nodes = self.nodes.clone();
        for mut col in nodes.column_iter_mut() {
            col -= &c;
        }
        Self {
            nodes,
            label: self.label.clone(),
        }
    }
}

/// World-frame node coordinates after a pose has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedBody {
    pub positions: DMatrix<f64>,
}

impl TransformedBody {
    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.ncols() == 0
    }
}

/// `S = Q·C + t·1ᵀ`.
pub fn apply_pose(template: &RigidBodyTemplate, pose: &Pose) -> Result<TransformedBody> {
    if template.dim() != pose.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: template.dim(),
            found: pose.dim(),
        });
    }
    let mut positions = pose.rotation_matrix() * template.nodes();
    for mut col in positions.column_iter_mut() {
        col += pose.translation();
    }
    Ok(TransformedBody { positions })
}

/// Symmetric matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    entries: DMatrix<f64>,
}

const DISTANCE_TOL: f64 = 1e-9;

impl DistanceMatrix {
    /// Validates zero diagonal, symmetry, non-negativity and the triangle
    /// inequality (tolerance 1e-9).
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let k = entries.nrows();
        if entries.ncols() != k || k == 0 {
            return Err(GeometryError::InvalidDistanceMatrix(format!(
                "shape {}×{} is not square and non-empty",
                k,
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("distance matrix"));
        }
        for i in 0..k {
            if entries[(i, i)].abs() > DISTANCE_TOL {
                return Err(GeometryError::InvalidDistanceMatrix(format!(
                    "diagonal entry {i} is {}",
                    entries[(i, i)]
                )));
            }
            for j in 0..k {
                let v = entries[(i, j)];
                if v < 0.0 {
                    return Err(GeometryError::InvalidDistanceMatrix(format!(
                        "entry ({i},{j}) is negative"
                    )));
                }
                if (v - entries[(j, i)]).abs() > DISTANCE_TOL {
                    return Err(GeometryError::InvalidDistanceMatrix(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
                for m in 0..k {
                    if v > entries[(i, m)] + entries[(m, j)] + DISTANCE_TOL {
                        return Err(GeometryError::InvalidDistanceMatrix(format!(
                            "triangle inequality fails for ({i},{m},{j})"
                        )));
                    }
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn distance_matrix(body: &DMatrix<f64>) -> Result<DistanceMatrix> {
    if body.ncols() == 0 {
        return Err(GeometryError::InvalidParameter(
            "distance matrix of zero nodes".into(),
        ));
    }
    if body.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("node coordinates"));
    }
    let k = body.ncols();
    let entries = DMatrix::from_fn(k, k, |i, j| (body.column(i) - body.column(j)).norm());
    Ok(DistanceMatrix { entries })
}

/// Classical MDS: node coordinates (centroid at the origin) whose distance
/// matrix reproduces `dm`, defined up to a rigid transform and reflection.
pub fn recover_template_mds(dm: &DistanceMatrix, dim: usize) -> Result<RigidBodyTemplate> {
    check_dim(dim)?;
    let k = dm.len();
    let sq = dm.entries.map(|v| v * v);
    let row_means = sq.column_mean();
    let total_mean = row_means.mean();
    // Gram matrix from double centering
    let gram = DMatrix::from_fn(k, k, |i, j| {
        -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + total_mean)
    });
    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.max().max(0.0);
    let tolerance = 1e-8 * max_eig.max(f64::MIN_POSITIVE);
    let min_eig = eig.eigenvalues.min();
    if min_eig < -tolerance {
        return Err(GeometryError::NotEmbeddable {
            dim,
            eigenvalue: min_eig,
            tolerance,
        });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut nodes = DMatrix::zeros(dim, k);
    for (axis, &idx) in order.iter().take(dim).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        for node in 0..k {
            nodes[(axis, node)] = scale * eig.eigenvectors[(node, idx)];
        }
    }
    // recentre against rounding drift
    let c = nodes.column_mean();
    for mut col in nodes.column_iter_mut() {
        col -= &c;
    }
    RigidBodyTemplate::new(nodes, "mds")
}

/// Best rigid fit of a template onto observed node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pose: Pose,
    /// Frobenius norm of the remaining misfit (meters).
    pub residual: f64,
}

/// Numerical rank of the centred node cloud.
pub fn centered_rank(nodes: &DMatrix<f64>) -> usize {
    let c = nodes.column_mean();
    let mut centered = nodes.clone();
    for mut col in centered.column_iter_mut() {
        col -= &c;
    }
    let sv = centered.singular_values();
    let scale = sv.max().max(nodes.abs().max()).max(1.0);
    sv.iter().filter(|&&s| s > 1e-10 * scale).count()
}

/// Closed-form least-squares rigid alignment (Kabsch with reflection guard).
pub fn procrustes_align(
    template: &RigidBodyTemplate,
    observed: &DMatrix<f64>,
) -> Result<Alignment> {
    let d = template.dim();
    if observed.nrows() != d {
        return Err(GeometryError::DimensionMismatch {
            expected: d,
            found: observed.nrows(),
        });
    }
    if observed.ncols() != template.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: template.len(),
            found: observed.ncols(),
        });
    }
    if observed.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("observed nodes"));
    }
    let required = d - 1;
    let rank = centered_rank(template.nodes());
    if rank < required.max(1) {
        return Err(GeometryError::RankDeficient {
            rank,
            required: required.max(1),
        });
    }
    let ct = template.centroid();
    let co = observed.column_mean();
    let mut h = DMatrix::zeros(d, d);
    for (x, y) in template.nodes().column_iter().zip(observed.column_iter()) {
        h += (x - &ct) * (y - &co).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let v = v_t.transpose();
    let mut correction = DMatrix::identity(d, d);
    if (&v * u.transpose()).determinant() < 0.0 {
        correction[(d - 1, d - 1)] = -1.0;
    }
    let q = v * correction * u.transpose();
    let t = &co - &q * &ct;
    let pose = Pose::new(RotationParam::from_matrix(&q)?, t)?;
    let fitted = apply_pose(template, &pose)?;
    let residual = (fitted.positions - observed).norm();
    Ok(Alignment { pose, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn square() -> RigidBodyTemplate {
        RigidBodyTemplate::from_rows(
            2,
            &[
                vec![0.0, 0.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0],
                vec![0.0, 1.0],
            ],
            "square",
        )
        .unwrap()
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_close!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-15);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        let q = RotationParam::planar(0.0).unwrap().matrix();
        assert_eq!(q, DMatrix::identity(2, 2));
        let q = RotationParam::planar(PI / 2.0).unwrap().matrix();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!((q - expected).amax() < 1e-15);
    }

    #[test]
    fn rotation_pi_over_six_matches_trig() {
        let a = PI / 6.0;
        let q = RotationParam::planar(a).unwrap().matrix();
        // cos(π/6) = √3/2, sin(π/6) = 1/2
        let c = 3f64.sqrt() / 2.0;
        assert_close!(q[(0, 0)], c, 1e-15);
        assert_close!(q[(0, 1)], -0.5, 1e-15);
        assert_close!(q[(1, 0)], 0.5, 1e-15);
        assert_close!(q[(1, 1)], c, 1e-15);
    }

    #[test]
    fn rotation_rejects_non_finite() {
        assert!(matches!(
            RotationParam::planar(f64::NAN),
            Err(GeometryError::InvalidParameter(_))
        ));
        assert!(RotationParam::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn rotation_3d_is_proper_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = RotationParam::new(vec![
                rng.random_range(-PI..PI),
                rng.random_range(-1.5..1.5),
                rng.random_range(-PI..PI),
            ])
            .unwrap();
            let q = r.matrix();
            assert!((q.transpose() * &q - DMatrix::identity(3, 3)).amax() < 1e-12);
            assert_close!(q.determinant(), 1.0, 1e-12);
            let back = RotationParam::from_matrix(&q).unwrap();
            assert!((back.matrix() - q).amax() < 1e-12);
        }
    }

    #[test]
    fn rotation_derivatives_match_central_differences() {
        let r = RotationParam::new(vec![0.3, -0.4, 1.1]).unwrap();
        let h = 1e-6;
        for (i, analytic) in r.derivatives().iter().enumerate() {
            let mut plus = r.angles().to_vec();
            let mut minus = r.angles().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fd = (RotationParam::new(plus).unwrap().matrix()
                - RotationParam::new(minus).unwrap().matrix())
                / (2.0 * h);
            assert!((fd - analytic).amax() < 1e-8);
        }
    }

    #[test]
    fn apply_identity_pose_is_noop() {
        let t = square();
        let s = apply_pose(&t, &Pose::identity(2).unwrap()).unwrap();
        assert_eq!(&s.positions, t.nodes());
    }

    #[test]
    fn apply_single_node_quarter_turn() {
        let t = RigidBodyTemplate::from_rows(2, &[vec![1.0, 0.0]], "p").unwrap();
        let s = apply_pose(&t, &Pose::planar(PI / 2.0, 0.0, 0.0).unwrap()).unwrap();
        assert_close!(s.positions[(0, 0)], 0.0, 1e-15);
        assert_close!(s.positions[(1, 0)], 1.0, 1e-15);
    }

    #[test]
    fn apply_pose_matches_per_node_oracle() {
        let t = RigidBodyTemplate::from_rows(
            2,
            &[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.5, 1.5]],
            "tri",
        )
        .unwrap();
        let a = PI / 4.0;
        let s = apply_pose(&t, &Pose::planar(a, 1.0, 2.0).unwrap()).unwrap();
        for k in 0..3 {
            let (x, y) = (t.nodes()[(0, k)], t.nodes()[(1, k)]);
            let ox = a.cos() * x - a.sin() * y + 1.0;
            let oy = a.sin() * x + a.cos() * y + 2.0;
            assert_close!(s.positions[(0, k)], ox, 1e-12);
            assert_close!(s.positions[(1, k)], oy, 1e-12);
        }
    }

    #[test]
    fn apply_pose_dimension_mismatch() {
        let pose = Pose::identity(3).unwrap();
        assert!(matches!(
            apply_pose(&square(), &pose),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_matrix_cases() {
        let one = distance_matrix(&DMatrix::from_row_slice(2, 1, &[4.0, 2.0])).unwrap();
        assert_eq!(one.entries(), &DMatrix::zeros(1, 1));
        let two = distance_matrix(&DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 4.0])).unwrap();
        assert_eq!(two.entries()[(0, 1)], 5.0);
        assert_eq!(two.entries()[(1, 0)], 5.0);
        let sq = distance_matrix(square().nodes()).unwrap();
        let r2 = 2f64.sqrt();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, r2, 1.0,
            1.0, 0.0, 1.0, r2,
            r2, 1.0, 0.0, 1.0,
            1.0, r2, 1.0, 0.0,
        ]);
        assert!((sq.entries() - expected).amax() < 1e-15);
        assert!(distance_matrix(&DMatrix::from_row_slice(2, 1, &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn distance_matrix_validation() {
        let bad = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0]);
        assert!(DistanceMatrix::new(bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(DistanceMatrix::new(asym).is_err());
    }

    #[test]
    fn mds_two_points() {
        let dm = DistanceMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).unwrap();
        let x = recover_template_mds(&dm, 2).unwrap();
        assert_close!(x.nodes()[(0, 0)].abs(), 1.0, 1e-12);
        assert_close!(x.nodes()[(0, 1)], -x.nodes()[(0, 0)], 1e-12);
        assert_close!(x.nodes()[(1, 0)], 0.0, 1e-12);
        assert_close!(x.nodes()[(1, 1)], 0.0, 1e-12);
    }

    #[test]
    fn mds_square_round_trip() {
        let dm = distance_matrix(square().nodes()).unwrap();
        let x = recover_template_mds(&dm, 2).unwrap();
        assert!(x.centroid().norm() < 1e-12);
        // recovered up to reflection, so compare distances
        let back = distance_matrix(x.nodes()).unwrap();
        assert!((back.entries() - dm.entries()).amax() < 1e-9);
    }

    #[test]
    fn mds_rejects_non_euclidean() {
        // satisfies the triangle inequality but not embeddable in the plane:
        // four points mutually at distance 1 need three dimensions
        let mut e = DMatrix::from_element(4, 4, 1.0);
        e.fill_diagonal(0.0);
        let dm = DistanceMatrix::new(e).unwrap();
        // embeddable in 3D, and the Gram spectrum is non-negative
        assert!(recover_template_mds(&dm, 3).is_ok());
        // a metric that violates Euclidean geometry: a "star" with long rim
        #[rustfmt::skip]
        let star = DMatrix::from_row_slice(4, 4, &[
            0.0, 1.0, 1.0, 1.0,
            1.0, 0.0, 2.0, 2.0,
            1.0, 2.0, 0.0, 2.0,
            1.0, 2.0, 2.0, 0.0,
        ]);
        let dm = DistanceMatrix::new(star).unwrap();
        assert!(matches!(
            recover_template_mds(&dm, 2),
            Err(GeometryError::NotEmbeddable { .. })
        ));
    }

    #[test]
    fn procrustes_identity() {
        let fit = procrustes_align(&square(), square().nodes()).unwrap();
        assert!(fit.pose.rotation().angles()[0].abs() < 1e-12);
        assert!(fit.pose.translation().norm() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn procrustes_recovers_forward_pose() {
        let truth = Pose::planar(PI / 6.0, 2.0, -1.0).unwrap();
        let obs = apply_pose(&square(), &truth).unwrap().positions;
        let fit = procrustes_align(&square(), &obs).unwrap();
        assert_close!(fit.pose.rotation().angles()[0], PI / 6.0, 1e-9);
        assert_close!(fit.pose.translation()[0], 2.0, 1e-9);
        assert_close!(fit.pose.translation()[1], -1.0, 1e-9);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn procrustes_beats_local_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = Pose::planar(0.7, 1.0, 3.0).unwrap();
        let mut obs = apply_pose(&square(), &truth).unwrap().positions;
        obs.iter_mut()
            .for_each(|v| *v += rng.random_range(-0.05..0.05));
        let fit = procrustes_align(&square(), &obs).unwrap();
        let (a0, t0) = (
            fit.pose.rotation().angles()[0],
            fit.pose.translation().clone(),
        );
        for i in -5..=5 {
            for j in -5..=5 {
                for l in -5..=5 {
                    let p = Pose::planar(
                        a0 + 0.001 * i as f64,
                        t0[0] + 0.01 * j as f64,
                        t0[1] + 0.01 * l as f64,
                    )
                    .unwrap();
                    let r = (apply_pose(&square(), &p).unwrap().positions - &obs).norm();
                    assert!(fit.residual <= r + 1e-15);
                }
            }
        }
    }

    #[test]
    fn procrustes_never_reflects() {
        let t = square();
        let mut mirrored = t.nodes().clone();
        mirrored.row_mut(0).iter_mut().for_each(|v| *v = -*v);
        let fit = procrustes_align(&t, &mirrored).unwrap();
        assert_close!(fit.pose.rotation_matrix().determinant(), 1.0, 1e-12);
    }

    #[test]
    fn procrustes_rank_errors() {
        let one = RigidBodyTemplate::from_rows(2, &[vec![1.0, 1.0]], "p").unwrap();
        assert!(matches!(
            procrustes_align(&one, &DMatrix::from_row_slice(2, 1, &[0.0, 0.0])),
            Err(GeometryError::RankDeficient { rank: 0, .. })
        ));
        let line = RigidBodyTemplate::from_rows(
            3,
            &[
                vec![0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![2.0, 0.0, 0.0],
            ],
            "line",
        )
        .unwrap();
        assert!(matches!(
            procrustes_align(&line, line.nodes()),
            Err(GeometryError::RankDeficient {
                rank: 1,
                required: 2
            })
        ));
    }

    #[test]
    fn template_json_round_trip() {
        let text = r#"{"dim": 2, "nodes": [[0,0],[1,0],[0,2]], "label": "tri"}"#;
        let t = RigidBodyTemplate::from_json(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.nodes()[(1, 2)], 2.0);
        assert_eq!(t.label(), "tri");
        assert_eq!(RigidBodyTemplate::from_json(&t.to_json()).unwrap(), t);
        assert!(RigidBodyTemplate::from_json(r#"{"dim":2,"nodes":[[0,0,0]]}"#).is_err());
        assert!(RigidBodyTemplate::from_json(r#"{"dim":2,"nodes":[[0,0],[0,0]]}"#).is_err());
    }

    #[test]
    fn template_invariants() {
        assert!(RigidBodyTemplate::new(DMatrix::zeros(2, 0), "").is_err());
        assert!(RigidBodyTemplate::new(DMatrix::zeros(4, 1), "").is_err());
    }
}
