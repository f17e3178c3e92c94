//! Simulation, characterization and optimal control of a superconducting
//! transmon qudit with charge-parity noise.

pub mod characterize;
pub mod classify;
pub mod controlopt;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod pulses;
pub mod qmodel;
pub mod sequence;
pub mod validate;
pub mod vdevice;

pub use classify::{ConfusionMatrix, GmmModel};
pub use controlopt::{ControlProblem, Ensemble, GateTarget, OptimizationReport};
pub use dynamics::{DensityMatrix, LindbladModel, LindbladSuperoperator, PropagationResult};
pub use error::{Error, Result};
pub use pulses::{BSplineBasis, ControlVector, Pulse};
pub use qmodel::{DeviceParams, Parity};
pub use sequence::{Schedule, Step};
pub use validate::{ProcessBasis, ProcessMatrix};
pub use vdevice::{ExperimentData, ExperimentKind, GroundTruth, VirtualDevice};
