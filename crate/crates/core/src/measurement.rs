//! Synthetic wireless observations from anchors to rigid-body nodes.
//!
//! Every `(anchor, node)` entry draws from its own RNG stream derived from the
//! observation seed, so generation is independent of iteration order.

use std::f64::consts::LN_10;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{matrix_to_rows, rows_to_matrix, wrap_angle, TransformedBody};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasurementError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("anchors {0} and {1} coincide")]
    DuplicateAnchors(usize, usize),
    #[error("bearing undefined: anchor {anchor} coincides with node {node}")]
    UndefinedBearing { anchor: usize, node: usize },
    #[error("RSSI singular: anchor {anchor} coincides with node {node}")]
    RssiSingularity { anchor: usize, node: usize },
    #[error("{0} observations require a 2D scene")]
    UnsupportedDimension(&'static str),
    #[error("observation JSON: {0}")]
    Json(String),
}

pub type Result<T> = std::result::Result<T, MeasurementError>;

/// Known anchor (base station) positions, one column per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    id: String,
    positions: DMatrix<f64>,
}

impl AnchorSet {
    pub fn new(id: impl Into<String>, positions: DMatrix<f64>) -> Result<Self> {
        let d = positions.nrows();
        if d != 2 && d != 3 {
            return Err(MeasurementError::InvalidParameter(format!(
                "anchor dimension must be 2 or 3, got {d}"
            )));
        }
        if positions.ncols() == 0 {
            return Err(MeasurementError::InvalidParameter(
                "at least one anchor is required".into(),
            ));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(MeasurementError::InvalidParameter(
                "anchor position is not finite".into(),
            ));
        }
        for i in 0..positions.ncols() {
            for j in i + 1..positions.ncols() {
                if positions.column(i) == positions.column(j) {
                    return Err(MeasurementError::DuplicateAnchors(i, j));
                }
            }
        }
        Ok(Self {
            id: id.into(),
            positions,
        })
    }

    pub fn from_rows(id: impl Into<String>, dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows_to_matrix(dim, rows)
            .map_err(|e| MeasurementError::InvalidParameter(e.to_string()))?;
        Self::new(id, m)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sub-set containing only the listed anchors.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(MeasurementError::InvalidParameter(format!(
                "anchor index {bad} out of range"
            )));
        }
        Self::new(
            format!("{}{:?}", self.id, indices),
            self.positions.select_columns(indices),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    /// Standard deviation in the modality's unit (m, rad or dB).
    pub sigma: f64,
    #[serde(default)]
    pub nlos_prob: f64,
    #[serde(default)]
    pub nlos_bias: f64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma,
            nlos_prob: 0.0,
            nlos_bias: 0.0,
        }
    }

    pub fn with_nlos(mut self, prob: f64, bias: f64) -> Self {
        self.nlos_prob = prob;
        self.nlos_bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(MeasurementError::InvalidParameter(format!(
                "sigma must be finite and ≥ 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.nlos_prob) {
            return Err(MeasurementError::InvalidParameter(format!(
                "nlos_prob must be in [0,1], got {}",
                self.nlos_prob
            )));
        }
        if !(self.nlos_bias >= 0.0 && self.nlos_bias.is_finite()) {
            return Err(MeasurementError::InvalidParameter(format!(
                "nlos_bias must be finite and ≥ 0, got {}",
                self.nlos_bias
            )));
        }
        Ok(())
    }
}

/// Log-distance path loss: `p0 − 10·eta·log10(d/d0)` dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssiModelParams {
    pub p0: f64,
    pub d0: f64,
    pub eta: f64,
}

impl Default for RssiModelParams {
    fn default() -> Self {
        Self {
            p0: -40.0,
            d0: 1.0,
            eta: 2.0,
        }
    }
}

impl RssiModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0 && self.eta > 0.0 && self.p0.is_finite()) {
            return Err(MeasurementError::InvalidParameter(format!(
                "RSSI model needs d0 > 0, eta > 0 and finite p0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn power_at(&self, distance: f64) -> f64 {
        self.p0 - 10.0 * self.eta * (distance / self.d0).log10()
    }

    /// Inverse of [`RssiModelParams::power_at`].
    pub fn distance_for(&self, power: f64) -> f64 {
        self.d0 * 10f64.powf((self.p0 - power) / (10.0 * self.eta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Range,
    Doa,
    Rssi,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Range => "range",
            Modality::Doa => "doa",
            Modality::Rssi => "rssi",
        }
    }
}

/// A modality together with whatever parameters its forward model needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeasurementModel {
    Range,
    /// 2D bearing from the anchor, measured from the +x axis.
    Doa,
    Rssi(RssiModelParams),
}

impl MeasurementModel {
    pub fn modality(&self) -> Modality {
        match self {
            MeasurementModel::Range => Modality::Range,
            MeasurementModel::Doa => Modality::Doa,
            MeasurementModel::Rssi(_) => Modality::Rssi,
        }
    }

    pub fn rssi_params(&self) -> Option<&RssiModelParams> {
        match self {
            MeasurementModel::Rssi(p) => Some(p),
            _ => None,
        }
    }

    /// Noiseless measurement of `node` taken at `anchor`.
    pub fn predict(&self, node: &[f64], anchor: &[f64]) -> f64 {
        match self {
            MeasurementModel::Range => dist(node, anchor),
            MeasurementModel::Doa => (node[1] - anchor[1]).atan2(node[0] - anchor[0]),
            MeasurementModel::Rssi(p) => p.power_at(dist(node, anchor)),
        }
    }

    /// Gradient of [`MeasurementModel::predict`] with respect to the node
    /// position. Zero where the model is singular (node on the anchor).
    pub fn gradient(&self, node: &[f64], anchor: &[f64]) -> DVector<f64> {
        let diff = DVector::from_iterator(node.len(), node.iter().zip(anchor).map(|(n, a)| n - a));
        let r2 = diff.norm_squared();
        if r2 == 0.0 {
            return DVector::zeros(node.len());
        }
        match self {
            MeasurementModel::Range => diff / r2.sqrt(),
            MeasurementModel::Doa => DVector::from_vec(vec![-diff[1] / r2, diff[0] / r2]),
            MeasurementModel::Rssi(p) => diff * (-10.0 * p.eta / (LN_10 * r2)),
        }
    }

    /// `predicted − observed`, wrapped for bearings.
    pub fn residual(&self, predicted: f64, observed: f64) -> f64 {
        match self {
            MeasurementModel::Doa => wrap_angle(predicted - observed),
            _ => predicted - observed,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Measurements from every anchor to every node, `values[(m, k)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub model: MeasurementModel,
    pub values: DMatrix<f64>,
    pub noise: NoiseSpec,
    pub rng_seed: u64,
    pub anchor_ref: String,
    /// Entries that received the NLOS bias.
    pub nlos: DMatrix<bool>,
    /// Range entries clamped up to zero after noise.
    pub clamped: DMatrix<bool>,
}

#[derive(Serialize, Deserialize)]
struct ObservationDoc {
    modality: Modality,
    anchors: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    sigma: f64,
    seed: u64,
    #[serde(default)]
    nlos_prob: f64,
    #[serde(default)]
    nlos_bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rssi_model: Option<RssiModelParams>,
    #[serde(default)]
    anchor_ref: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nlos: Vec<Vec<bool>>,
}

impl ObservationSet {
    pub fn modality(&self) -> Modality {
        self.model.modality()
    }

    pub fn anchor_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn node_count(&self) -> usize {
        self.values.ncols()
    }

    /// Column subset (nodes) of this observation set.
    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        Self {
            values: self.values.select_columns(nodes),
            nlos: self.nlos.select_columns(nodes),
            clamped: self.clamped.select_columns(nodes),
            ..self.clone()
        }
    }

    /// Row subset (anchors) of this observation set.
    pub fn select_anchors(&self, anchors: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(anchors),
            nlos: self.nlos.select_rows(anchors),
            clamped: self.clamped.select_rows(anchors),
            ..self.clone()
        }
    }

    /// Concatenates the node columns of several sets sharing one anchor set.
    pub fn concat_nodes(parts: &[&ObservationSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| MeasurementError::InvalidParameter("nothing to concatenate".into()))?;
        let m = first.anchor_count();
        if let Some(bad) = parts.iter().find(|p| p.anchor_count() != m) {
            return Err(MeasurementError::DimensionMismatch {
                expected: m,
                found: bad.anchor_count(),
            });
        }
        let k: usize = parts.iter().map(|p| p.node_count()).sum();
        let mut values = DMatrix::zeros(m, k);
        let mut nlos = DMatrix::from_element(m, k, false);
        let mut clamped = DMatrix::from_element(m, k, false);
        let mut col = 0;
        for p in parts {
            let n = p.node_count();
            values.columns_mut(col, n).copy_from(&p.values);
            nlos.columns_mut(col, n).copy_from(&p.nlos);
            clamped.columns_mut(col, n).copy_from(&p.clamped);
            col += n;
        }
        Ok(Self {
            values,
            nlos,
            clamped,
            ..(*first).clone()
        })
    }

    pub fn to_json(&self, anchors: &AnchorSet) -> String {
        let doc = ObservationDoc {
            modality: self.modality(),
            anchors: matrix_to_rows(anchors.positions()),
            values: self
                .values
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            sigma: self.noise.sigma,
            seed: self.rng_seed,
            nlos_prob: self.noise.nlos_prob,
            nlos_bias: self.noise.nlos_bias,
            rssi_model: self.model.rssi_params().copied(),
            anchor_ref: self.anchor_ref.clone(),
            nlos: self
                .nlos
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("observation serialises")
    }

    /// Parses the JSON form, returning the observations and their anchors.
    pub fn from_json(text: &str) -> Result<(Self, AnchorSet)> {
        let doc: ObservationDoc =
            serde_json::from_str(text).map_err(|e| MeasurementError::Json(e.to_string()))?;
        let dim = doc.anchors.first().map_or(2, Vec::len);
        let anchor_id = if doc.anchor_ref.is_empty() {
            "anchors".to_string()
        } else {
            doc.anchor_ref.clone()
        };
        let anchors = AnchorSet::from_rows(anchor_id, dim, &doc.anchors)?;
        let m = anchors.len();
        if doc.values.len() != m {
            return Err(MeasurementError::DimensionMismatch {
                expected: m,
                found: doc.values.len(),
            });
        }
        let k = doc.values.first().map_or(0, Vec::len);
        if doc.values.iter().any(|r| r.len() != k) {
            return Err(MeasurementError::Json("ragged values matrix".into()));
        }
        let values = DMatrix::from_fn(m, k, |i, j| doc.values[i][j]);
        let nlos = if doc.nlos.is_empty() {
            DMatrix::from_element(m, k, false)
        } else {
            if doc.nlos.len() != m || doc.nlos.iter().any(|r| r.len() != k) {
                return Err(MeasurementError::Json("nlos flags shape mismatch".into()));
            }
            DMatrix::from_fn(m, k, |i, j| doc.nlos[i][j])
        };
        let model = match doc.modality {
            Modality::Range => MeasurementModel::Range,
            Modality::Doa => MeasurementModel::Doa,
            Modality::Rssi => MeasurementModel::Rssi(doc.rssi_model.ok_or_else(|| {
                MeasurementError::Json("rssi observations need an rssi_model".into())
            })?),
        };
        let noise = NoiseSpec::gaussian(doc.sigma).with_nlos(doc.nlos_prob, doc.nlos_bias);
        noise.validate()?;
        let clamped = DMatrix::from_element(m, k, false);
        Ok((
            Self {
                model,
                values,
                noise,
                rng_seed: doc.seed,
                anchor_ref: anchors.id().to_string(),
                nlos,
                clamped,
            },
            anchors,
        ))
    }

    /// One row per `(anchor, node)` entry: `anchor_id,node_id,value,is_nlos`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("anchor_id,node_id,value,is_nlos\n");
        for m in 0..self.anchor_count() {
            for k in 0..self.node_count() {
                let _ = writeln!(out, "{m},{k},{},{}", self.values[(m, k)], self.nlos[(m, k)]);
            }
        }
        out
    }
}

struct Draw {
    gaussian: f64,
    nlos: bool,
}

fn draw(seed: u64, anchor: usize, node: usize, noise: &NoiseSpec) -> Draw {
    let mut rng = stream(derive_seed(seed, &[anchor as u64, node as u64]));
    let z: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    Draw {
        gaussian: noise.sigma * z,
        nlos: u < noise.nlos_prob,
    }
}

fn check_inputs(body: &TransformedBody, anchors: &AnchorSet, noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    if body.dim() != anchors.dim() {
        return Err(MeasurementError::DimensionMismatch {
            expected: anchors.dim(),
            found: body.dim(),
        });
    }
    if body.positions.iter().any(|v| !v.is_finite()) {
        return Err(MeasurementError::InvalidParameter(
            "node position is not finite".into(),
        ));
    }
    Ok(())
}

fn empty_set(
    model: MeasurementModel,
    body: &TransformedBody,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    seed: u64,
) -> ObservationSet {
    let (m, k) = (anchors.len(), body.len());
    ObservationSet {
        model,
        values: DMatrix::zeros(m, k),
        noise: *noise,
        rng_seed: seed,
        anchor_ref: anchors.id().to_string(),
        nlos: DMatrix::from_element(m, k, false),
        clamped: DMatrix::from_element(m, k, false),
    }
}

/// Bearings from each anchor to each node, wrapped to `(−π, π]`.
pub fn gen_doa(
    body: &TransformedBody,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    check_inputs(body, anchors, noise)?;
    if body.dim() != 2 {
        return Err(MeasurementError::UnsupportedDimension("DoA"));
    }
    let mut obs = empty_set(MeasurementModel::Doa, body, anchors, noise, seed);
    for (m, a) in anchors.positions().column_iter().enumerate() {
        for (k, s) in body.positions.column_iter().enumerate() {
            if s == a {
                return Err(MeasurementError::UndefinedBearing { anchor: m, node: k });
            }
            let truth = (s[1] - a[1]).atan2(s[0] - a[0]);
            let d = draw(seed, m, k, noise);
            let bias = if d.nlos { noise.nlos_bias } else { 0.0 };
            obs.values[(m, k)] = wrap_angle(truth + d.gaussian + bias);
            obs.nlos[(m, k)] = d.nlos;
        }
    }
    Ok(obs)
}

/// Ranges from each anchor to each node; negative noisy ranges clamp to 0.
pub fn gen_range(
    body: &TransformedBody,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    check_inputs(body, anchors, noise)?;
    let mut obs = empty_set(MeasurementModel::Range, body, anchors, noise, seed);
    for (m, a) in anchors.positions().column_iter().enumerate() {
        for (k, s) in body.positions.column_iter().enumerate() {
            let truth = (s - a).norm();
            let d = draw(seed, m, k, noise);
            let bias = if d.nlos { noise.nlos_bias } else { 0.0 };
            let v = truth + d.gaussian + bias;
            obs.values[(m, k)] = v.max(0.0);
            obs.clamped[(m, k)] = v < 0.0;
            obs.nlos[(m, k)] = d.nlos;
        }
    }
    Ok(obs)
}

/// Received power at each anchor from each node. An NLOS event attenuates
/// the received power by `nlos_bias` dB.
pub fn gen_rssi(
    body: &TransformedBody,
    anchors: &AnchorSet,
    model: &RssiModelParams,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    check_inputs(body, anchors, noise)?;
    model.validate()?;
    let mut obs = empty_set(MeasurementModel::Rssi(*model), body, anchors, noise, seed);
    for (m, a) in anchors.positions().column_iter().enumerate() {
        for (k, s) in body.positions.column_iter().enumerate() {
            let distance = (s - a).norm();
            if distance == 0.0 {
                return Err(MeasurementError::RssiSingularity { anchor: m, node: k });
            }
            let d = draw(seed, m, k, noise);
            let bias = if d.nlos { noise.nlos_bias } else { 0.0 };
            obs.values[(m, k)] = model.power_at(distance) + d.gaussian - bias;
            obs.nlos[(m, k)] = d.nlos;
        }
    }
    Ok(obs)
}

/// Dispatches to the generator for `model`.
pub fn generate(
    model: &MeasurementModel,
    body: &TransformedBody,
    anchors: &AnchorSet,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    match model {
        MeasurementModel::Range => gen_range(body, anchors, noise, seed),
        MeasurementModel::Doa => gen_doa(body, anchors, noise, seed),
        MeasurementModel::Rssi(p) => gen_rssi(body, anchors, p, noise, seed),
    }
}
