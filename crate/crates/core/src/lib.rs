//! Quantum kernel estimation backed by matrix product state simulation.
//!
//! The pipeline encodes each data row into an `m`-qubit state with a
//! Trotterized Ising feature map, simulates the circuit as an MPS with
//! bounded-error SVD truncation, and assembles Gram matrices of squared
//! overlaps that feed a precomputed-kernel SVM.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense complex tensors, contraction, reshape, truncated SVD.
//! - [`mps`]: MPS state, gate application, canonical form, inner products.
//! - [`ansatz`]: feature-map circuits, SWAP routing and layer scheduling.
//! - [`kernel`]: per-row simulation, Gram matrices, tiled parallel schedules.
//! - [`learn`]: preprocessing, Gaussian baseline, SMO solver, metrics.

pub mod ansatz;
pub mod kernel;
pub mod learn;
pub mod mps;
pub mod tensor;

pub use ansatz::{Circuit, FeatureMapConfig, Gate, GateKind, InteractionGraph};
pub use kernel::{GramKind, GramMatrix, Strategy, TileSchedule};
pub use learn::{Dataset, Metrics, SvmModel};
pub use mps::{Basis, MpsState, SimStats};
pub use tensor::{DenseTensor, SvdResult};

pub use num_complex::Complex64 as C64;
