//! Particle solver for mean-field-type control of jump-diffusions via the
//! stochastic maximum principle.
//!
//! The forward McKean-Vlasov dynamics are simulated on an interacting particle
//! ensemble, the adjoint equation with jumps is solved backward by regression
//! Monte Carlo, and the two are coupled through the pointwise minimizers of the
//! Hamiltonian in a damped Picard iteration. Around a solved problem the crate
//! provides Jacobian and pinned flows, value-function derivatives, a sufficiency
//! certificate, a mean-field Ito check and an HJB residual, plus a closed-form
//! linear-quadratic oracle.

mod accel;
pub mod adjoint;
pub mod array;
pub mod control;
pub mod error;
pub mod exec;
pub mod grid;
pub mod io;
pub mod lqoracle;
pub mod measure;
pub mod model;
pub mod noise;
pub mod regression;
pub mod sensitivity;
pub mod simulate;
pub mod solver;
pub mod value;

pub use error::{Error, Result};
