#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rbl_core::geometry::centered_rank;
use rbl_core::{wrap_angle, AnchorSet, Pose, RigidBodyTemplate, RotationParam};

pub fn square(side: f64) -> RigidBodyTemplate {
    let h = side / 2.0;
    RigidBodyTemplate::from_rows(
        2,
        &[vec![-h, -h], vec![h, -h], vec![h, h], vec![-h, h]],
        "square",
    )
    .unwrap()
}

pub fn rectangle(length: f64, width: f64) -> RigidBodyTemplate {
    let (a, b) = (length / 2.0, width / 2.0);
    RigidBodyTemplate::from_rows(
        2,
        &[vec![-a, -b], vec![a, -b], vec![a, b], vec![-a, b]],
        "rect",
    )
    .unwrap()
}

/// Nodes uniform in `[-2, 2]^d`, well separated and of full centred rank.
pub fn random_template(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> RigidBodyTemplate {
    loop {
        let nodes = DMatrix::from_fn(dim, k, |_, _| rng.random_range(-2.0..2.0));
        let separated =
            (0..k).all(|a| (a + 1..k).all(|b| (nodes.column(a) - nodes.column(b)).norm() > 0.2));
        if separated && centered_rank(&nodes) == dim.min(k.saturating_sub(1)) {
            return RigidBodyTemplate::new(nodes, "random").unwrap();
        }
    }
}

pub fn random_pose(rng: &mut ChaCha8Rng, dim: usize, reach: f64) -> Pose {
    let angles = (0..RotationParam::angle_count(dim))
        .map(|_| rng.random_range(-PI..PI))
        .collect();
    let t = DVector::from_fn(dim, |_, _| rng.random_range(-reach..reach));
    Pose::new(RotationParam::new(angles).unwrap(), t).unwrap()
}

pub fn anchors(rows: &[[f64; 2]]) -> AnchorSet {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    AnchorSet::from_rows("anchors", 2, &rows).unwrap()
}

/// `m` anchors uniform in `[0, side]^2`, pairwise at least `side/10` apart.
pub fn random_anchors(rng: &mut ChaCha8Rng, m: usize, side: f64) -> AnchorSet {
    loop {
        let p = DMatrix::from_fn(2, m, |_, _| rng.random_range(0.0..side));
        if (0..m).all(|a| (a + 1..m).all(|b| (p.column(a) - p.column(b)).norm() > side / 10.0)) {
            return AnchorSet::new("anchors", p).unwrap();
        }
    }
}

/// Planar rotation error (radians) and translation error.
pub fn planar_error(est: &Pose, truth: &Pose) -> (f64, f64) {
    let da = wrap_angle(est.rotation().angles()[0] - truth.rotation().angles()[0]).abs();
    (da, (est.translation() - truth.translation()).norm())
}

pub fn node_rmse(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    ((est - truth).norm_squared() / truth.ncols() as f64).sqrt()
}
