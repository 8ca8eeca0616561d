//! Identification of the support and intensity of a source term in an
//! elliptic equation from boundary Cauchy data.
//!
//! The forward model is `-Δu + u = f + q·χ_ω` on the square `Ω = (-1,1)²`
//! with a prescribed Neumann flux and an observed Dirichlet trace. Both the
//! support `ω` and the strength `q` are unknown. Eliminating `q` through the
//! first-order optimality condition of the Tikhonov-regularized least-squares
//! functional leaves a shape optimization problem for a coupled elliptic
//! system, which this crate solves by steepest descent over a level-set
//! representation of `ω`:
//!
//! * [`mesh`] — conforming triangulations of the hold-all square;
//! * [`sparse`] — CSR matrices and the iterative/direct linear solvers;
//! * [`cutcell`] — exact sub-polygon integration on elements cut by an
//!   implicit interface;
//! * [`levelset`] — the nodal level-set field, interface extraction,
//!   advection and redistancing;
//! * [`fem`] — P1 assembly, the coupled optimality system, objective
//!   evaluation;
//! * [`shapeopt`] — shape gradients (surface and distributed forms),
//!   Hilbertian velocity extension, the descent loop;
//! * [`harness`] — built-in experiments, synthetic data generation, error
//!   metrics, intensity post-processing;
//! * [`checks`] — self-contained verification routines shared by the CLI
//!   `check` command and the acceptance test suite.

pub mod checks;
pub mod cutcell;
pub mod error;
pub mod expr;
pub mod fem;
pub mod harness;
pub mod levelset;
pub mod mesh;
pub mod shapeopt;
pub mod sparse;
pub mod vtk;

pub use error::{Error, Result};
pub use fem::{BoundaryData, CoupledSolution, FunctionP1};
pub use levelset::{InterfaceMesh, LevelSetField};
pub use mesh::TriMesh;
pub use shapeopt::{History, IterationRecord, OptimizeConfig, VelocityField};
pub use sparse::{SparseMatrix, TripletBuffer};
