//! Singular infinite-horizon linear-quadratic control with known
//! exponentially decaying disturbances.
//!
//! This crate solves optimal control problems whose quadratic cost does not
//! penalize every control coordinate: the weight matrix on the control is
//! positive semidefinite with a nontrivial kernel, so the classical Riccati
//! machinery does not apply directly. The approach is regularization by
//! partial cheap control: the missing weights are filled in with a small
//! parameter `eps^2`, the regularized problem is solved exactly, and the
//! family of solutions is followed as `eps` tends to zero. The limit is
//! described by a reduced-order Riccati equation in the part of the state
//! that the unweighted controls cannot reach instantaneously, and the crate
//! exposes both the exact regularized solutions and the limit objects,
//! together with minimizing control sequences whose costs approach the
//! infimum of the original singular problem.
//!
//! The main entry points are:
//!
//! * [`problem::RawProblem`] / [`problem::Oocp`] — problem containers before
//!   and after the decoupling change of state coordinates,
//! * [`transform::transform_problem`] — the change of coordinates itself,
//! * [`cheap::solve_pccp`] — exact solution of the regularized problem for a
//!   fixed `eps > 0`,
//! * [`reduced::solve_reduced`] — the limit (`eps -> 0`) objects and the
//!   minimizing control sequences built from them,
//! * [`sim`] — closed-loop simulation and cost evaluation used to verify
//!   convergence claims numerically.
//!
//! A worked tour lives in the book under `book/`; its chapters are compiled
//! as doc-tests through [`guide`].

pub mod cheap;
pub mod cli;
pub mod error;
pub mod guide;
pub mod linalg;
pub mod problem;
pub mod reduced;
pub mod sim;
pub mod transform;

pub use error::{Error, Result};
