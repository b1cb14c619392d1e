pub mod bernstein_sim;
pub mod chain_oracle;
pub mod cli;
pub mod coefficients;
pub mod error;
pub mod expr;
pub mod fbsde_verifier;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod pde_engine;
pub mod report;
pub mod stats;

pub use error::{LabError, Result};
