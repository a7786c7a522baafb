//! Embedded deformation graphs for non-rigid registration and deformable
//! mapping.
//!
//! The crate builds a deformation graph over a model, evaluates the
//! rotation, regularisation and data energies, and minimises them with one
//! of three interchangeable strategies:
//!
//! - [`solver::solve_batch`]: damped Gauss-Newton over every parameter;
//! - [`solver::solve_marginalized`]: the same steps, computed by eliminating
//!   the nodes that no visible vertex touches through a Schur complement;
//! - [`solver::solve_decoupled`]: a lossy two-level scheme that first solves
//!   the global pose and visible-region nodes with the others held fixed,
//!   then relaxes the remaining nodes against rotation and regularisation
//!   only. Its first level has a size independent of the total graph size.
//!
//! [`scenario`] generates synthetic expanding-map sequences and
//! [`bench`] measures solver cost as the graph grows.

pub mod bench;
pub mod deform;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod instance;
pub mod mesh;
pub mod scenario;
pub mod solver;
pub mod sparse;
pub mod spatial;
pub mod state;

pub use error::{Error, Result};
pub use graph::{BindingTable, EdGraph, Partition};
pub use mesh::{Mesh, PointSet};
pub use state::DeformState;
