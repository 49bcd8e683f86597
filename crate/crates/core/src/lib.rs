//! Financial contagion with leverage-triggered fire sales.
//!
//! A network of firms owes obligations to each other and to an outside node.
//! Firms hold cash and illiquid assets; when a firm breaches its leverage cap
//! it sells illiquid assets, which depresses prices through an inverse demand
//! function and feeds back into every firm's mark-to-market balance sheet.
//! The crate computes clearing payments and prices as fixed points, either for
//! a known liquidation strategy or with liquidations chosen as a Nash
//! equilibrium, and runs calibrated scenario sweeps on top.

pub mod calibration;
pub mod clearing;
pub mod demand;
pub mod equilibrium;
pub mod error;
pub mod liquidation;
pub mod model;
pub mod scenario;
mod seed;

pub use clearing::{ClearingProblem, ClearingSolution, SolveStatus, SolverOptions};
pub use demand::{DemandSpec, InverseDemand};
pub use equilibrium::{EquilibriumOptions, EquilibriumSolution};
pub use error::{Error, Result};
pub use liquidation::{LiquidationStrategy, Requirement};
pub use model::{ClearingState, FinancialSystem, Matrix, RelativeLiabilities};
