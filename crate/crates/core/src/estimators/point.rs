use nalgebra::{DMatrix, DVector};

use super::problem::NodeProblem;
use super::solver::{gauss_newton, GaussNewtonOptions};
use super::{EstimationError, EstimationResult, Result};
use crate::geometry::centered_rank;
use crate::measurement::{AnchorSet, MeasurementModel, ObservationSet};

pub(crate) fn check_shapes(obs: &ObservationSet, anchors: &AnchorSet) -> Result<()> {
    if obs.anchor_count() != anchors.len() {
        return Err(EstimationError::InvalidInput(format!(
            "{} observation rows for {} anchors",
            obs.anchor_count(),
            anchors.len()
        )));
    }
    if obs.values.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::InvalidInput(
            "observation values must be finite".into(),
        ));
    }
    if matches!(obs.model, MeasurementModel::Doa) && anchors.dim() != 2 {
        return Err(EstimationError::InvalidInput(
            "bearing estimation is 2D only".into(),
        ));
    }
    Ok(())
}

/// Least-squares solve via SVD; `None` when the system is rank deficient.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax.max(1e-300) || a.nrows() < a.ncols() {
        return None;
    }
    svd.solve(b, 0.0).ok()
}

/// Multilateration by differencing squared ranges against the first anchor.
pub(crate) fn linear_from_ranges(ranges: &[f64], anchors: &DMatrix<f64>) -> Option<DVector<f64>> {
    let m = anchors.ncols();
    let d = anchors.nrows();
    if m < d + 1 {
        return None;
    }
    let a0 = anchors.column(0);
    let mut a = DMatrix::zeros(m - 1, d);
    let mut b = DVector::zeros(m - 1);
    for i in 1..m {
        let ai = anchors.column(i);
        a.row_mut(i - 1).copy_from(&(2.0 * (ai - a0)).transpose());
        b[i - 1] =
            ai.norm_squared() - a0.norm_squared() - ranges[i] * ranges[i] + ranges[0] * ranges[0];
    }
    lstsq(&a, &b)
}

/// Intersection of bearing lines in the least-squares sense.
pub(crate) fn linear_from_bearings(
    bearings: &[f64],
    anchors: &DMatrix<f64>,
) -> Option<DVector<f64>> {
    let m = anchors.ncols();
    let mut a = DMatrix::zeros(m, 2);
    let mut b = DVector::zeros(m);
    for (i, &th) in bearings.iter().enumerate() {
        let (s, c) = th.sin_cos();
        a[(i, 0)] = s;
        a[(i, 1)] = -c;
        b[i] = s * anchors[(0, i)] - c * anchors[(1, i)];
    }
    lstsq(&a, &b)
}

pub(crate) fn linear_node_init(
    model: &MeasurementModel,
    values: &[f64],
    anchors: &DMatrix<f64>,
) -> Option<DVector<f64>> {
    match model {
        MeasurementModel::Range => linear_from_ranges(values, anchors),
        MeasurementModel::Rssi(p) => {
            let ranges: Vec<f64> = values.iter().map(|&v| p.distance_for(v)).collect();
            linear_from_ranges(&ranges, anchors)
        }
        MeasurementModel::Doa => linear_from_bearings(values, anchors),
    }
}

fn check_point_identifiable(model: &MeasurementModel, anchors: &AnchorSet) -> Result<()> {
    let (d, m) = (anchors.dim(), anchors.len());
    match model {
        MeasurementModel::Doa => {
            if m < 2 {
                return Err(EstimationError::Identifiability(format!(
                    "bearing-only positioning needs at least 2 anchors, got {m}: \
                     a single bearing leaves the range along the ray unconstrained"
                )));
            }
        }
        MeasurementModel::Range | MeasurementModel::Rssi(_) => {
            if m < d + 1 {
                return Err(EstimationError::Identifiability(format!(
                    "range-type positioning in {d}D needs at least {} anchors, got {m}",
                    d + 1
                )));
            }
            let rank = centered_rank(anchors.positions());
            if rank < d {
                return Err(EstimationError::Identifiability(format!(
                    "anchors span only {rank} of {d} dimensions"
                )));
            }
        }
    }
    Ok(())
}

/// Independent per-node Gauss–Newton positioning, ignoring rigidity.
///
/// With `init = None` each node starts from a closed-form linear solution.
pub fn point_ls_locate(
    obs: &ObservationSet,
    anchors: &AnchorSet,
    init: Option<&DVector<f64>>,
    opts: &GaussNewtonOptions,
) -> Result<EstimationResult> {
    check_shapes(obs, anchors)?;
    check_point_identifiable(&obs.model, anchors)?;
    let d = anchors.dim();
    if let Some(p) = init {
        if p.len() != d {
            return Err(EstimationError::InvalidInput(format!(
                "initial point has {} coordinates, expected {d}",
                p.len()
            )));
        }
    }
    let k = obs.node_count();
    let mut nodes = DMatrix::zeros(d, k);
    let mut objective = 0.0;
    let mut iterations = 0;
    let mut converged = true;
    let mut grad_sq = 0.0;
    let mut trace = vec![0.0];
    for node in 0..k {
        let values: Vec<f64> = obs.values.column(node).iter().copied().collect();
        let problem = NodeProblem {
            model: &obs.model,
            values: &values,
            anchors: anchors.positions(),
        };
        let start = match init {
            Some(p) => p.clone(),
            None => linear_node_init(&obs.model, &values, anchors.positions())
                .unwrap_or_else(|| anchors.positions().column_mean()),
        };
        let sol = gauss_newton(&problem, &start, opts);
        nodes.set_column(node, &sol.params);
        objective += sol.objective;
        iterations = iterations.max(sol.iterations);
        converged &= sol.converged;
        grad_sq += sol.gradient_norm * sol.gradient_norm;
        if trace.len() < sol.trace.len() {
            trace.resize(sol.trace.len(), 0.0);
        }
        for (i, slot) in trace.iter_mut().enumerate() {
            *slot += sol.trace[i.min(sol.trace.len() - 1)];
        }
    }
    Ok(EstimationResult {
        pose: None,
        node_positions: nodes,
        objective,
        iterations,
        converged,
        gradient_norm: grad_sq.sqrt(),
        covariance_est: None,
        objective_trace: trace,
        flags: Vec::new(),
    })
}
