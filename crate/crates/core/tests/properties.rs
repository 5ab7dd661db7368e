mod common;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rbl_core::estimators::rbl_refine;
use rbl_core::estimators::solver::GaussNewtonOptions;
use rbl_core::harness::{run_experiment, ExperimentConfig};
use rbl_core::measurement::gen_range;
use rbl_core::rng::stream;
use rbl_core::soft::{apply_multi_pose, penalty, MultiBodyModel};
use rbl_core::{
    apply_pose, distance_matrix, procrustes_align, wrap_angle, NoiseSpec, Pose, RotationParam,
    SoftConstraint,
};

use common::{anchors, random_template, square};

fn pose(dim: usize) -> impl Strategy<Value = Pose> {
    let n = RotationParam::angle_count(dim);
    (
        prop::collection::vec(-10.0..10.0f64, n),
        prop::collection::vec(-50.0..50.0f64, dim),
    )
        .prop_map(move |(a, t)| {
            Pose::new(RotationParam::new(a).unwrap(), DVector::from_vec(t)).unwrap()
        })
}

fn dim_and_pose() -> impl Strategy<Value = (usize, Pose)> {
    prop_oneof![Just(2usize), Just(3usize)].prop_flat_map(|d| (Just(d), pose(d)))
}

proptest! {
    #[test]
    fn rotations_are_proper((dim, p) in dim_and_pose()) {
        let q = p.rotation_matrix();
        let gram = q.transpose() * &q - DMatrix::identity(dim, dim);
        prop_assert!(gram.amax() < 1e-12);
        prop_assert!((q.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poses_preserve_distances((dim, p) in dim_and_pose(), k in 1usize..9, seed in any::<u64>()) {
        let t = random_template(&mut stream(seed), dim, k);
        let s = apply_pose(&t, &p).unwrap();
        let diff = distance_matrix(t.nodes()).unwrap().entries() - distance_matrix(&s.positions).unwrap().entries();
        prop_assert!(diff.amax() < 1e-11);
    }

    #[test]
    fn procrustes_inverts_apply_pose((dim, p) in dim_and_pose(), extra in 1usize..5, seed in any::<u64>()) {
        let t = random_template(&mut stream(seed), dim, dim + extra);
        let a = procrustes_align(&t, &apply_pose(&t, &p).unwrap().positions).unwrap();
        prop_assert!((a.pose.rotation_matrix() - p.rotation_matrix()).amax() < 1e-9);
        prop_assert!((a.pose.translation() - p.translation()).amax() < 1e-9);
    }

    #[test]
    fn wrapped_angles_stay_in_range(x in -1e4..1e4f64) {
        let w = wrap_angle(x);
        prop_assert!(w > -PI && w <= PI);
        let turns = (x - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn penalty_grows_with_violation(gap in 0.0..20.0f64, more in 0.0..5.0f64, lo in 0.0..5.0f64, width in 0.0..3.0f64, w in 0.0..100.0f64) {
        let at = |x: f64| {
            let m = MultiBodyModel::new(
                vec![square(1.0), square(1.0)],
                vec![Pose::planar(0.0, 0.0, 0.0).unwrap(), Pose::planar(0.0, x, 0.0).unwrap()],
            ).unwrap();
            penalty(&m, &[SoftConstraint::distance(0, 1, lo, lo + width, w)]).unwrap()
        };
        let (p1, p2) = (at(lo + width + gap), at(lo + width + gap + more));
        prop_assert!(p1 >= 0.0);
        prop_assert!(p2 >= p1);
    }

    #[test]
    fn multi_pose_is_per_body(a in pose(2), b in pose(2), seed in any::<u64>()) {
        let mut rng = stream(seed);
        let bodies = vec![random_template(&mut rng, 2, 3), random_template(&mut rng, 2, 5)];
        let m = MultiBodyModel::new(bodies.clone(), vec![a.clone(), b.clone()]).unwrap();
        let s = apply_multi_pose(&m);
        let first = apply_pose(&bodies[0], &a).unwrap().positions;
        let second = apply_pose(&bodies[1], &b).unwrap().positions;
        prop_assert!((s.columns(0, 3) - first).amax() < 1e-12);
        prop_assert!((s.columns(3, 5) - second).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gauss_newton_trace_never_increases(alpha in -PI..PI, dx in -1.0..1.0f64, dy in -1.0..1.0f64, da in -0.5..0.5f64, seed in any::<u64>()) {
        let t = square(1.0);
        let a = anchors(&[[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]);
        let truth = Pose::planar(alpha, 5.0, 5.0).unwrap();
        let obs = gen_range(&apply_pose(&t, &truth).unwrap(), &a, &NoiseSpec::gaussian(0.1), seed).unwrap();
        let start = Pose::planar(alpha + da, 5.0 + dx, 5.0 + dy).unwrap();
        let r = rbl_refine(&obs, &a, &t, &start, &GaussNewtonOptions::default()).unwrap();
        for w in r.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_cell_gets_its_trials(n_est in 1usize..4, n_sigma in 1usize..4, trials in 1usize..6) {
        let estimators = ["point_ls", "rbl", "soft_joint"][..n_est].iter().map(|e| format!("\"{e}\"")).collect::<Vec<_>>();
        let sigmas = ["0.05", "0.1", "0.3"][..n_sigma].join(",");
        let text = format!(r#"{{
            "schema": 1,
            "scenario": {{
              "dim": 2,
              "bodies": [{{"template": {{"dim": 2, "nodes": [[0, 0], [1, 0], [0, 1]]}}, "pose": {{"angles": [0.2], "translation": [3, 4]}}}}],
              "anchors": [[0, 0], [10, 0], [0, 10]]
            }},
            "modality": "range",
            "noise": {{"sigmas": [{sigmas}]}},
            "estimators": [{}],
            "trials": {trials},
            "master_seed": 1
        }}"#, estimators.join(","));
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let out = run_experiment(&cfg, 2).unwrap();
        prop_assert_eq!(out.trials.len(), n_est * n_sigma * trials);
        prop_assert_eq!(out.summary.cells.len(), n_est * n_sigma);
    }
}
