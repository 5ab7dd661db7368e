//! Rigid-body localization toolkit.
//!
//! A rigid body is a set of `K` nodes with known relative geometry (the
//! [`RigidBodyTemplate`]). Its world-frame placement is a rotation plus a
//! translation (the [`Pose`]), so estimating the body reduces to estimating a
//! handful of pose parameters instead of `d·K` free coordinates.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: rotations, the affine body transform, distance matrices,
//!   classical MDS template recovery and Procrustes alignment.
//! * [`measurement`]: synthetic DoA, range and RSSI observations with
//!   Gaussian noise and optional NLOS bias.
//! * [`estimators`]: point-based baselines, rigid-body estimators, GPR
//!   localization and the numeric Cramér–Rao bound.
//! * [`soft`]: several bodies (or several time frames of one body) estimated
//!   jointly under bounded, penalised inter-body constraints.
//! * [`harness`]: declarative Monte Carlo experiments and their CSV/JSON
//!   outputs.

pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod measurement;
pub mod rng;
pub mod soft;

pub use estimators::{EstimationError, EstimationResult, ResultFlag};
pub use geometry::{
    apply_pose, distance_matrix, procrustes_align, recover_template_mds, wrap_angle, Alignment,
    DistanceMatrix, GeometryError, Pose, RigidBodyTemplate, RotationParam, TransformedBody,
};
pub use measurement::{
    AnchorSet, MeasurementError, MeasurementModel, Modality, NoiseSpec, ObservationSet,
    RssiModelParams,
};
pub use soft::{MultiBodyModel, SoftConstraint};
