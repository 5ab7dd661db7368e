//! Gaussian process regression from RSSI vectors to coordinates.
//!
//! Kernel between RSSI vectors `p`, `q` (training indices `i`, `j`):
//!
//! ```text
//! φ(p, q) = amp·exp(−½ (p−q)ᵀ B⁻¹ (p−q)) + lin·pᵀq + noise_var·δ_ij,   B = diag(β)
//! ```
//!
//! Each output coordinate is an independent zero-mean GP on the centred
//! targets; all coordinates share one hyperparameter set.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::{EstimationError, EstimationResult, Result, ResultFlag};
use crate::geometry::{apply_pose, procrustes_align, Pose, RigidBodyTemplate};
use crate::measurement::ObservationSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprHyperparams {
    pub amp: f64,
    /// Diagonal of `B`, one entry per RSSI component.
    pub length_scales: Vec<f64>,
    pub lin: f64,
    pub noise_var: f64,
}

impl GprHyperparams {
    pub fn new(amp: f64, length_scales: Vec<f64>, lin: f64, noise_var: f64) -> Self {
        Self {
            amp,
            length_scales,
            lin,
            noise_var,
        }
    }

    pub fn validate(&self, input_len: usize) -> Result<()> {
        if self.length_scales.len() != input_len {
            return Err(EstimationError::InvalidInput(format!(
                "{} length scales for {input_len}-component RSSI vectors",
                self.length_scales.len()
            )));
        }
        let ok = self.amp > 0.0
            && self.amp.is_finite()
            && self.length_scales.iter().all(|b| *b > 0.0 && b.is_finite())
            && self.lin >= 0.0
            && self.lin.is_finite()
            && self.noise_var >= 0.0
            && self.noise_var.is_finite();
        if !ok {
            return Err(EstimationError::InvalidInput(format!(
                "hyperparameters need amp > 0, β > 0, lin ≥ 0, noise_var ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// `[amp, β…, lin, noise_var]`.
    fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.amp];
        v.extend(&self.length_scales);
        v.push(self.lin);
        v.push(self.noise_var);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let m = v.len() - 3;
        Self {
            amp: v[0],
            length_scales: v[1..=m].to_vec(),
            lin: v[m + 1],
            noise_var: v[m + 2],
        }
    }
}

fn rbf_exponent(h: &GprHyperparams, p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(&h.length_scales)
        .map(|((a, b), beta)| (a - b) * (a - b) / beta)
        .sum::<f64>()
}

/// `φ(p, q)`; `same_index` switches on the noise term.
pub fn kernel(h: &GprHyperparams, p: &[f64], q: &[f64], same_index: bool) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let noise = if same_index { h.noise_var } else { 0.0 };
    h.amp * (-0.5 * rbf_exponent(h, p, q)).exp() + h.lin * dot + noise
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn kernel_matrix(h: &GprHyperparams, x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| kernel(h, &x[i], &x[j], i == j))
}

const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky factor of `K + jitter·mean(diag K)·I`, escalating the jitter
/// from 0 through 1e-8 … 1e-4.
fn factor(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = k.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    for jitter in JITTERS {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter * scale;
        }
        if let Some(ch) = kj.cholesky() {
            if ch
                .l_dirty()
                .diagonal()
                .iter()
                .all(|v| v.is_finite() && *v > 0.0)
            {
                return Ok((ch, jitter));
            }
        }
    }
    Err(EstimationError::Conditioning {
        jitter: JITTERS[JITTERS.len() - 1],
    })
}

fn check_training(inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
    if inputs.nrows() < 2 {
        return Err(EstimationError::InvalidInput(format!(
            "GPR needs at least 2 training samples, got {}",
            inputs.nrows()
        )));
    }
    if targets.nrows() != inputs.nrows() {
        return Err(EstimationError::InvalidInput(format!(
            "{} inputs but {} targets",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(EstimationError::InvalidInput(
            "training data must be finite".into(),
        ));
    }
    Ok(())
}

fn centered(targets: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = targets.row_mean().transpose();
    let mut y = targets.clone();
    for mut r in y.row_iter_mut() {
        r -= mean.transpose();
    }
    (y, mean)
}

/// Marginal log-likelihood of the targets (summed over output coordinates)
/// and its gradient with respect to `[ln amp, ln β…, ln lin, ln noise_var]`.
///
/// `inputs` is `N×M` (one RSSI vector per row), `targets` is `N×D`.
pub fn log_marginal_likelihood(
    h: &GprHyperparams,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_training(inputs, targets)?;
    h.validate(inputs.ncols())?;
    let x = rows(inputs);
    let (y, _) = centered(targets);
    let (n, outputs) = (y.nrows(), y.ncols());
    let k = kernel_matrix(h, &x);
    let (ch, _) = factor(&k)?;
    let alpha = ch.solve(&y);
    let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let fit: f64 = y.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    let lml =
        -0.5 * fit - 0.5 * outputs as f64 * log_det - 0.5 * (n * outputs) as f64 * (2.0 * PI).ln();

    // ½ tr((ααᵀ − D·K⁻¹) ∂K/∂θ)
    let k_inv = ch.inverse();
    let inner = &alpha * alpha.transpose() - k_inv * outputs as f64;
    let m = inputs.ncols();
    let mut grad = DVector::zeros(m + 3);
    let half_trace = |dk: &dyn Fn(usize, usize) -> f64| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += inner[(i, j)] * dk(i, j);
            }
        }
        0.5 * s
    };
    let rbf = DMatrix::from_fn(n, n, |i, j| {
        h.amp * (-0.5 * rbf_exponent(h, &x[i], &x[j])).exp()
    });
    grad[0] = half_trace(&|i, j| rbf[(i, j)]);
    for c in 0..m {
        let beta = h.length_scales[c];
        grad[1 + c] = half_trace(&|i, j| {
            let d = x[i][c] - x[j][c];
            rbf[(i, j)] * 0.5 * d * d / beta
        });
    }
    grad[m + 1] =
        half_trace(&|i, j| h.lin * x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>());
    grad[m + 2] = half_trace(&|i, j| if i == j { h.noise_var } else { 0.0 });
    Ok((lml, grad))
}

/// A fitted GP. Immutable once built.
#[derive(Debug, Clone)]
pub struct GprModel {
    pub hyper: GprHyperparams,
    inputs: Vec<Vec<f64>>,
    targets: DMatrix<f64>,
    target_mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DMatrix<f64>,
    /// Relative diagonal jitter that made the kernel matrix factorable.
    pub jitter: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl GprModel {
    /// Conditions a GP on training data with fixed hyperparameters.
    pub fn fit(h: GprHyperparams, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        let (lml, _) = log_marginal_likelihood(&h, inputs, targets)?;
        let x = rows(inputs);
        let (y, mean) = centered(targets);
        let (chol, jitter) = factor(&kernel_matrix(&h, &x))?;
        let alpha = chol.solve(&y);
        Ok(Self {
            hyper: h,
            inputs: x,
            targets: targets.clone(),
            target_mean: mean,
            chol,
            alpha,
            jitter,
            log_likelihood: lml,
            iterations: 0,
            converged: true,
        })
    }

    pub fn input_len(&self) -> usize {
        self.hyper.length_scales.len()
    }

    pub fn output_len(&self) -> usize {
        self.targets.ncols()
    }

    pub fn training_len(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GprTrainOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
}

impl Default for GprTrainOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tol: 1e-6,
        }
    }
}

/// Maximises the marginal likelihood by gradient ascent in log-hyperparameter
/// space with an adaptive step. Hyperparameters initialised to zero (`lin`,
/// `noise_var`) stay at zero.
pub fn gpr_train(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    init: &GprHyperparams,
    opts: &GprTrainOptions,
) -> Result<GprModel> {
    check_training(inputs, targets)?;
    init.validate(inputs.ncols())?;
    let base = init.to_vec();
    let free: Vec<usize> = (0..base.len()).filter(|&i| base[i] > 0.0).collect();
    let to_hyper = |theta: &[f64]| {
        let mut v = base.clone();
        for (slot, &i) in free.iter().enumerate() {
            v[i] = theta[slot].exp();
        }
        GprHyperparams::from_vec(&v)
    };
    let eval = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let h = to_hyper(theta);
        let (l, g) = log_marginal_likelihood(&h, inputs, targets).ok()?;
        l.is_finite()
            .then(|| (l, free.iter().map(|&i| g[i]).collect()))
    };

    let mut theta: Vec<f64> = free.iter().map(|&i| base[i].ln()).collect();
    let (mut lml, mut grad) = eval(&theta).ok_or(EstimationError::Conditioning {
        jitter: JITTERS[JITTERS.len() - 1],
    })?;
    let mut step = 0.1 / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < opts.gradient_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| (t + step * g).clamp(-30.0, 30.0))
                .collect();
            if let Some((l, g)) = eval(&trial) {
                if l > lml {
                    theta = trial;
                    lml = l;
                    grad = g;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
            }
            step *= 0.25;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let mut model = GprModel::fit(to_hyper(&theta), inputs, targets)?;
    model.iterations = iterations;
    model.converged = converged;
    Ok(model)
}

/// Posterior mean and latent variance of every output coordinate.
pub fn gpr_predict(model: &GprModel, query: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    if query.len() != model.input_len() {
        return Err(EstimationError::InvalidInput(format!(
            "query has {} components, model expects {}",
            query.len(),
            model.input_len()
        )));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::InvalidInput("query must be finite".into()));
    }
    let h = &model.hyper;
    let kstar = DVector::from_iterator(
        model.inputs.len(),
        model.inputs.iter().map(|x| kernel(h, query, x, false)),
    );
    let mean = &model.target_mean + model.alpha.transpose() * &kstar;
    let v = model
        .chol
        .l_dirty()
        .lower_triangle()
        .solve_lower_triangular(&kstar)
        .unwrap_or_else(|| DVector::zeros(kstar.len()));
    let prior = kernel(h, query, query, false);
    let var = (prior - v.norm_squared()).max(0.0);
    Ok((mean, DVector::from_element(model.output_len(), var)))
}

/// GPR position of every node: column `k` of the RSSI matrix is the query.
pub fn gpr_locate_nodes(model: &GprModel, obs: &ObservationSet) -> Result<DMatrix<f64>> {
    let k = obs.node_count();
    let mut out = DMatrix::zeros(model.output_len(), k);
    for node in 0..k {
        let q: Vec<f64> = obs.values.column(node).iter().copied().collect();
        let (mean, _) = gpr_predict(model, &q)?;
        out.set_column(node, &mean);
    }
    Ok(out)
}

/// Snaps per-node GPR estimates onto the rigid template by Procrustes
/// alignment. A single node only fixes the translation.
pub fn gpr_rbl_project(
    per_node_estimates: &DMatrix<f64>,
    template: &RigidBodyTemplate,
) -> Result<EstimationResult> {
    if per_node_estimates.shape() != template.nodes().shape() {
        return Err(EstimationError::InvalidInput(format!(
            "estimates are {:?}, template is {:?}",
            per_node_estimates.shape(),
            template.nodes().shape()
        )));
    }
    let (pose, residual, flags) = if template.len() == 1 {
        let t = per_node_estimates.column(0) - template.nodes().column(0);
        let pose = Pose::new(crate::geometry::RotationParam::identity(template.dim())?, t)?;
        (pose, 0.0, vec![ResultFlag::RotationIndeterminate])
    } else {
        let fit = procrustes_align(template, per_node_estimates)?;
        (fit.pose, fit.residual, Vec::new())
    };
    let nodes = apply_pose(template, &pose)?.positions;
    Ok(EstimationResult {
        pose: Some(pose),
        node_positions: nodes,
        objective: residual * residual,
        iterations: 0,
        converged: true,
        gradient_norm: 0.0,
        covariance_est: None,
        objective_trace: vec![residual * residual],
        flags,
    })
}
