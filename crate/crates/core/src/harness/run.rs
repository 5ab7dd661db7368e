use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::stats::{summarize, MetricStats};
use super::HarnessError;
use crate::estimators::solver::GaussNewtonOptions;
use crate::estimators::{
    crlb_numeric, gpr_locate_nodes, gpr_rbl_project, gpr_train, point_ls_locate, rbl_estimate,
    EstimationResult, GprHyperparams, GprModel, GprTrainOptions, ResultFlag,
};
use crate::geometry::{
    apply_pose, wrap_angle, Pose, RigidBodyTemplate, RotationParam, TransformedBody,
};
use crate::measurement::{generate, AnchorSet, MeasurementModel, Modality, ObservationSet};
use crate::rng::{derive_seed, hash_str, stream};
use crate::soft::{joint_estimate_soft, BodyData, JointOptions};

/// One `(estimator, σ, trial)` outcome. Metrics are `None` when the
/// estimator failed or does not produce them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub estimator: String,
    pub sigma: f64,
    pub sigma_index: usize,
    pub trial: usize,
    /// RMS over bodies of the rotation error (radians).
    pub angle_err: Option<f64>,
    /// RMS over bodies of the translation error.
    pub trans_err: Option<f64>,
    /// Root mean squared node position error over all bodies.
    pub node_rmse: Option<f64>,
    pub objective: Option<f64>,
    pub converged: bool,
    pub wall_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Unconstrained bound for the cell's true geometry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrlbOverlay {
    pub angle: f64,
    pub translation: f64,
    pub node_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub estimator: String,
    pub sigma: f64,
    pub sigma_index: usize,
    pub trials: usize,
    pub failures: usize,
    pub not_converged: usize,
    pub angle_err: Option<MetricStats>,
    pub trans_err: Option<MetricStats>,
    pub node_rmse: Option<MetricStats>,
    pub crlb: Option<CrlbOverlay>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub master_seed: u64,
    pub modality: Modality,
    pub estimators: Vec<String>,
    pub sigmas: Vec<f64>,
    pub trials_per_cell: usize,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub trials: Vec<TrialResult>,
    pub summary: Summary,
}

/// Seed of one trial's observations. Replays a single trial exactly.
pub fn trial_seed(
    master_seed: u64,
    estimator: &str,
    sigma_index: usize,
    trial: usize,
    paired: bool,
) -> u64 {
    let name = if paired { 0 } else { hash_str(estimator) };
    derive_seed(master_seed, &[name, sigma_index as u64, trial as u64])
}

/// True poses of every body in `trial`.
pub fn trial_poses(config: &ExperimentConfig, trial: usize) -> Vec<Pose> {
    let base: Vec<Pose> = config
        .scenario
        .bodies
        .iter()
        .map(|b| b.pose.clone())
        .collect();
    let spread = config.pose_spread;
    if spread.is_zero() {
        return base;
    }
    let mut rng = stream(derive_seed(
        config.master_seed,
        &[hash_str("pose"), trial as u64],
    ));
    base.into_iter()
        .map(|p| {
            let angles: Vec<f64> = p
                .rotation()
                .angles()
                .iter()
                .map(|a| {
                    if spread.angle > 0.0 {
                        a + rng.random_range(-spread.angle..=spread.angle)
                    } else {
                        *a
                    }
                })
                .collect();
            let t = p.translation().map(|v| {
                if spread.translation > 0.0 {
                    v + rng.random_range(-spread.translation..=spread.translation)
                } else {
                    v
                }
            });
            Pose::new(RotationParam::new(angles).expect("finite angles"), t).expect("finite pose")
        })
        .collect()
}

/// Rotation error in radians: wrapped angle difference in 2D, geodesic
/// angle of `Qᵀ·Q̂` in 3D.
pub fn rotation_error(truth: &Pose, estimate: &Pose) -> f64 {
    if truth.dim() == 2 {
        return wrap_angle(estimate.rotation().angles()[0] - truth.rotation().angles()[0]).abs();
    }
    let r = truth.rotation_matrix().transpose() * estimate.rotation_matrix();
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    model: MeasurementModel,
    templates: Vec<RigidBodyTemplate>,
    anchors: Vec<AnchorSet>,
    gn: GaussNewtonOptions,
    joint: JointOptions,
    gpr: Vec<Option<Result<GprModel, String>>>,
}

fn train_gpr(
    config: &ExperimentConfig,
    model: &MeasurementModel,
    anchors: &AnchorSet,
    sigma_index: usize,
) -> Result<GprModel, String> {
    let g = config.gpr.as_ref().ok_or("missing gpr block")?;
    let pts = g.grid();
    let d = config.scenario.dim;
    let positions = DMatrix::from_fn(d, pts.len(), |r, c| pts[c][r]);
    let body = TransformedBody {
        positions: positions.clone(),
    };
    let sigma = config.noise.sigmas[sigma_index];
    let seed = derive_seed(
        config.master_seed,
        &[hash_str("gpr-train"), sigma_index as u64],
    );
    let obs = generate(model, &body, anchors, &config.noise_at(sigma), seed)
        .map_err(|e| e.to_string())?;
    let inputs = obs.values.transpose();
    let targets = positions.transpose();
    let h = GprHyperparams::new(
        g.amp,
        vec![g.length_scale; anchors.len()],
        g.lin,
        g.noise_var,
    );
    let result = if g.train {
        gpr_train(
            &inputs,
            &targets,
            &h,
            &GprTrainOptions {
                max_iterations: g.max_iterations,
                ..GprTrainOptions::default()
            },
        )
    } else {
        GprModel::fit(h, &inputs, &targets)
    };
    result.map_err(|e| e.to_string())
}

fn estimate(
    ctx: &Context<'_>,
    estimator: &str,
    obs: &[ObservationSet],
    sigma_index: usize,
) -> Result<Vec<EstimationResult>, String> {
    let per_body = |f: &dyn Fn(usize) -> crate::estimators::Result<EstimationResult>| -> Result<Vec<EstimationResult>, String> {
        (0..obs.len()).map(|b| f(b).map_err(|e| e.to_string())).collect()
    };
    match estimator {
        "point_ls" => per_body(&|b| point_ls_locate(&obs[b], &ctx.anchors[b], None, &ctx.gn)),
        "rbl" => per_body(&|b| {
            if matches!(ctx.model, MeasurementModel::Doa) {
                crate::estimators::doa_rbl_estimate(
                    &obs[b],
                    &ctx.anchors[b],
                    &ctx.templates[b],
                    None,
                    &crate::estimators::DoaOptions {
                        starts: ctx.config.solver.doa_starts,
                        solver: ctx.gn,
                    },
                )
            } else {
                rbl_estimate(&obs[b], &ctx.anchors[b], &ctx.templates[b], None, &ctx.gn)
            }
        }),
        "soft_joint" => {
            let bodies: Vec<BodyData<'_>> = (0..obs.len())
                .map(|b| BodyData {
                    template: &ctx.templates[b],
                    obs: &obs[b],
                    anchors: &ctx.anchors[b],
                    init: None,
                })
                .collect();
            joint_estimate_soft(&bodies, &ctx.config.scenario.constraints, &ctx.joint)
                .map(|j| j.results)
                .map_err(|e| e.to_string())
        }
        "gpr" | "gpr_rbl" => {
            let model = match &ctx.gpr[sigma_index] {
                Some(Ok(m)) => m,
                Some(Err(e)) => return Err(format!("gpr training failed: {e}")),
                None => return Err("gpr model not trained".into()),
            };
            per_body(&|b| {
                let nodes = gpr_locate_nodes(model, &obs[b])?;
                if estimator == "gpr" {
                    Ok(EstimationResult {
                        pose: None,
                        node_positions: nodes,
                        objective: f64::NAN,
                        iterations: 0,
                        converged: true,
                        gradient_norm: 0.0,
                        covariance_est: None,
                        objective_trace: Vec::new(),
                        flags: Vec::new(),
                    })
                } else {
                    gpr_rbl_project(&nodes, &ctx.templates[b])
                }
            })
        }
        other => Err(format!("unknown estimator {other}")),
    }
}

struct Metrics {
    angle_err: Option<f64>,
    trans_err: Option<f64>,
    node_rmse: f64,
    objective: Option<f64>,
    converged: bool,
}

fn metrics(results: &[EstimationResult], truth: &[Pose], truth_nodes: &[DMatrix<f64>]) -> Metrics {
    let mut sq = 0.0;
    let mut count = 0;
    for (r, t) in results.iter().zip(truth_nodes) {
        sq += (&r.node_positions - t).norm_squared();
        count += t.ncols();
    }
    let node_rmse = (sq / count as f64).sqrt();
    let poses: Option<Vec<&Pose>> = results.iter().map(|r| r.pose.as_ref()).collect();
    let rotation_known = !results
        .iter()
        .any(|r| r.has_flag(ResultFlag::RotationIndeterminate));
    let rms = |v: Vec<f64>| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let (angle_err, trans_err) = match poses {
        Some(p) => (
            rotation_known.then(|| {
                rms(p
                    .iter()
                    .zip(truth)
                    .map(|(e, t)| rotation_error(t, e))
                    .collect())
            }),
            Some(rms(p
                .iter()
                .zip(truth)
                .map(|(e, t)| (e.translation() - t.translation()).norm())
                .collect())),
        ),
        None => (None, None),
    };
    let objective: f64 = results.iter().map(|r| r.objective).sum();
    Metrics {
        angle_err,
        trans_err,
        node_rmse,
        objective: objective.is_finite().then_some(objective),
        converged: results.iter().all(|r| r.converged),
    }
}

fn run_trial(ctx: &Context<'_>, estimator: &str, sigma_index: usize, trial: usize) -> TrialResult {
    let config = ctx.config;
    let sigma = config.noise.sigmas[sigma_index];
    let started = Instant::now();
    let truth = trial_poses(config, trial);
    let seed = trial_seed(
        config.master_seed,
        estimator,
        sigma_index,
        trial,
        config.paired_noise,
    );
    let noise = config.noise_at(sigma);

    let outcome = (|| -> Result<(Metrics, Vec<DMatrix<f64>>), String> {
        let mut nodes = Vec::with_capacity(truth.len());
        let mut obs = Vec::with_capacity(truth.len());
        for (b, pose) in truth.iter().enumerate() {
            let body = apply_pose(&ctx.templates[b], pose).map_err(|e| e.to_string())?;
            obs.push(
                generate(
                    &ctx.model,
                    &body,
                    &ctx.anchors[b],
                    &noise,
                    derive_seed(seed, &[b as u64]),
                )
                .map_err(|e| e.to_string())?,
            );
            nodes.push(body.positions);
        }
        let results = estimate(ctx, estimator, &obs, sigma_index)?;
        Ok((metrics(&results, &truth, &nodes), nodes))
    })();
    let wall_s = if config.timing {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let base = TrialResult {
        estimator: estimator.to_string(),
        sigma,
        sigma_index,
        trial,
        angle_err: None,
        trans_err: None,
        node_rmse: None,
        objective: None,
        converged: false,
        wall_s,
        error: None,
    };
    match outcome {
        Ok((m, _)) if m.node_rmse.is_finite() => TrialResult {
            angle_err: m.angle_err.filter(|v| v.is_finite()),
            trans_err: m.trans_err.filter(|v| v.is_finite()),
            node_rmse: Some(m.node_rmse),
            objective: m.objective,
            converged: m.converged,
            ..base
        },
        Ok(_) => TrialResult {
            error: Some("non-finite estimate".into()),
            ..base
        },
        Err(e) => TrialResult {
            error: Some(e),
            ..base
        },
    }
}

/// Whether the unconstrained bound applies to this estimator's cells.
fn crlb_applies(config: &ExperimentConfig, estimator: &str) -> bool {
    let unconstrained = config.scenario.constraints.iter().all(|c| c.weight == 0.0);
    let gaussian = config.noise.nlos_prob == 0.0;
    gaussian
        && config.pose_spread.is_zero()
        && (estimator == "rbl" || (estimator == "soft_joint" && unconstrained))
}

/// Bound for every body at the nominal poses, combined over bodies.
pub fn crlb_overlay(config: &ExperimentConfig, sigma: f64) -> Result<CrlbOverlay, String> {
    let model = config.model();
    let anchors = config.body_anchors().map_err(|e| e.to_string())?;
    let (mut angle, mut trans, mut node, mut nodes) = (0.0, 0.0, 0.0, 0usize);
    let bodies = &config.scenario.bodies;
    for (b, body) in bodies.iter().enumerate() {
        let r = crlb_numeric(&body.pose, &body.template, &anchors[b], &model, sigma)
            .map_err(|e| format!("body {b}: {e}"))?;
        angle += r.angle_bound.powi(2);
        trans += r.translation_bound.powi(2);
        node += r.node_rmse_bound.powi(2) * body.template.len() as f64;
        nodes += body.template.len();
    }
    let n = bodies.len() as f64;
    Ok(CrlbOverlay {
        angle: (angle / n).sqrt(),
        translation: (trans / n).sqrt(),
        node_rmse: (node / nodes as f64).sqrt(),
    })
}

/// Runs every `(estimator, σ, trial)` cell on a pool of `workers` threads.
///
/// Results do not depend on `workers`: every trial draws from its own seed
/// and output order is fixed by the config.
pub fn run_experiment(
    config: &ExperimentConfig,
    workers: usize,
) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let model = config.model();
    let anchors = config.body_anchors()?;
    let gn = GaussNewtonOptions {
        max_iterations: config.solver.max_iterations,
        ..GaussNewtonOptions::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let wants_gpr = config.estimators.iter().any(|e| e.starts_with("gpr"));
    let gpr: Vec<Option<Result<GprModel, String>>> = pool.install(|| {
        (0..config.noise.sigmas.len())
            .into_par_iter()
            .map(|s| wants_gpr.then(|| train_gpr(config, &model, &anchors[0], s)))
            .collect()
    });
    let ctx = Context {
        config,
        model,
        templates: config.templates(),
        anchors,
        gn,
        joint: JointOptions {
            solver: gn,
            rounds: config.solver.penalty_rounds,
            ramp: config.solver.penalty_ramp,
            ..JointOptions::default()
        },
        gpr,
    };

    let tasks: Vec<(usize, usize, usize)> = (0..config.estimators.len())
        .flat_map(|e| {
            (0..config.noise.sigmas.len())
                .flat_map(move |s| (0..config.trials).map(move |t| (e, s, t)))
        })
        .collect();
    let trials: Vec<TrialResult> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(e, s, t)| run_trial(&ctx, &config.estimators[e], s, t))
            .collect()
    });
    let summary = summarize_trials(config, &trials);
    Ok(ExperimentOutput { trials, summary })
}

/// Per-cell statistics in config order.
pub fn summarize_trials(config: &ExperimentConfig, trials: &[TrialResult]) -> Summary {
    let mut cells = Vec::new();
    for (e, name) in config.estimators.iter().enumerate() {
        for (s, &sigma) in config.noise.sigmas.iter().enumerate() {
            let rows: Vec<&TrialResult> = trials
                .iter()
                .filter(|r| &r.estimator == name && r.sigma_index == s)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let collect = |f: fn(&TrialResult) -> Option<f64>| -> Vec<f64> {
                rows.iter().filter_map(|r| f(r)).collect()
            };
            let seed = |k: u64| {
                derive_seed(
                    config.master_seed,
                    &[hash_str("bootstrap"), e as u64, s as u64, k],
                )
            };
            let crlb = (sigma > 0.0 && crlb_applies(config, name))
                .then(|| crlb_overlay(config, sigma).ok())
                .flatten();
            cells.push(CellSummary {
                estimator: name.clone(),
                sigma,
                sigma_index: s,
                trials: rows.len(),
                failures: rows.iter().filter(|r| r.error.is_some()).count(),
                not_converged: rows.iter().filter(|r| !r.converged).count(),
                angle_err: summarize(&collect(|r| r.angle_err), seed(0)),
                trans_err: summarize(&collect(|r| r.trans_err), seed(1)),
                node_rmse: summarize(&collect(|r| r.node_rmse), seed(2)),
                crlb,
            });
        }
    }
    Summary {
        schema: super::config::SCHEMA_VERSION,
        master_seed: config.master_seed,
        modality: config.modality,
        estimators: config.estimators.clone(),
        sigmas: config.noise.sigmas.clone(),
        trials_per_cell: config.trials,
        cells,
    }
}

/// A σ level and its bound, or why the bound is unavailable.
pub type CrlbRow = (f64, Result<CrlbOverlay, String>);

/// Bound-only evaluation: one overlay per σ level.
pub fn crlb_table(config: &ExperimentConfig) -> Result<Vec<CrlbRow>, HarnessError> {
    config.validate()?;
    Ok(config
        .noise
        .sigmas
        .iter()
        .map(|&s| {
            let r = if s > 0.0 {
                crlb_overlay(config, s)
            } else {
                Err("σ = 0 has no finite bound".into())
            };
            (s, r)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    fn base() -> String {
        r#"{
            "schema": 1,
            "scenario": {
                "dim": 2,
                "bodies": [{
                    "template": {"dim": 2, "nodes": [[-0.5,-0.5],[0.5,-0.5],[0.5,0.5],[-0.5,0.5]], "label": "sq"},
                    "pose": {"angles": [0.4], "translation": [5.0, 4.0]}
                }],
                "anchors": [[0,0],[10,0],[10,10],[0,10]]
            },
            "modality": "range",
            "noise": {"sigmas": [0.0, 0.1]},
            "estimators": ["point_ls", "rbl"],
            "trials": 4,
            "master_seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn noiseless_rbl_is_exact() {
        let out = run_experiment(&config(&base()), 2).unwrap();
        assert_eq!(out.trials.len(), 2 * 2 * 4);
        for r in out.trials.iter().filter(|r| r.sigma == 0.0) {
            assert!(r.node_rmse.unwrap() < 1e-6, "{r:?}");
            assert!(r.converged);
        }
        let rbl0 = out
            .trials
            .iter()
            .find(|r| r.estimator == "rbl" && r.sigma == 0.0)
            .unwrap();
        assert!(rbl0.angle_err.unwrap() < 1e-6);
        let pls = out
            .trials
            .iter()
            .find(|r| r.estimator == "point_ls")
            .unwrap();
        assert!(pls.angle_err.is_none());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let c = config(&base());
        assert_eq!(
            run_experiment(&c, 1).unwrap(),
            run_experiment(&c, 4).unwrap()
        );
    }

    #[test]
    fn crlb_overlay_only_for_pose_estimators_with_noise() {
        let out = run_experiment(&config(&base()), 1).unwrap();
        for cell in &out.summary.cells {
            let expect = cell.estimator == "rbl" && cell.sigma > 0.0;
            assert_eq!(cell.crlb.is_some(), expect, "{cell:?}");
        }
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        // one anchor cannot position anything by range
        let text = base().replace("[[0,0],[10,0],[10,10],[0,10]]", "[[0,0]]");
        let out = run_experiment(&config(&text), 1).unwrap();
        assert!(out.trials.iter().all(|r| !r.converged && r.error.is_some()));
        assert!(out
            .summary
            .cells
            .iter()
            .all(|c| c.failures == 4 && c.node_rmse.is_none()));
    }

    #[test]
    fn pose_spread_is_shared_across_estimators() {
        let text = base().replace(
            "\"trials\": 4",
            "\"trials\": 4, \"pose_spread\": {\"angle\": 1.0, \"translation\": 2.0}",
        );
        let c = config(&text);
        let a = trial_poses(&c, 3);
        assert_eq!(a, trial_poses(&c, 3));
        assert_ne!(a, trial_poses(&c, 2));
        assert!((a[0].translation()[0] - 5.0).abs() <= 2.0);
    }

    #[test]
    fn rotation_error_3d_is_geodesic() {
        let a = Pose::new(
            RotationParam::new(vec![0.0, 0.0, 0.0]).unwrap(),
            DVector::zeros(3),
        )
        .unwrap();
        let b = Pose::new(
            RotationParam::new(vec![0.3, 0.0, 0.0]).unwrap(),
            DVector::zeros(3),
        )
        .unwrap();
        assert!((rotation_error(&a, &b) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn gpr_estimators_run() {
        let text = base()
            .replace("\"modality\": \"range\"", "\"modality\": \"rssi\"")
            .replace("[0.0, 0.1]", "[0.5]")
            .replace(
                "\"point_ls\", \"rbl\"",
                "\"gpr\", \"gpr_rbl\"",
            )
            .replace(
                "\"master_seed\": 7",
                "\"master_seed\": 7, \"gpr\": {\"grid_min\": [1,1], \"grid_max\": [9,9], \"grid_steps\": [9,9], \"max_iterations\": 50}",
            );
        let out = run_experiment(&config(&text), 2).unwrap();
        for r in &out.trials {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.node_rmse.unwrap() < 1.5, "{r:?}");
        }
        assert!(out
            .trials
            .iter()
            .filter(|r| r.estimator == "gpr")
            .all(|r| r.objective.is_none()));
    }
}
