//! Deep BSDE / deep backward PDE solvers for best-of options under a
//! multi-asset Heston model.
//!
//! The crate is organised bottom-up:
//!
//! - [`ad`]: tensors, reverse-mode differentiation, MLPs and Adam.
//! - [`models`]: Heston dynamics, the Euler scheme, payoff and driver.
//! - [`oracle`]: Monte Carlo and Black–Scholes reference prices.
//! - [`solvers`]: DBSDE, DBDP1, DBDP2, DS and MDBDP.
//! - [`harness`]: seeded sweeps, quartile statistics and CSV reports.
//! - [`config`]: the INI-style configuration format shared with the CLI.

pub mod ad;
pub mod config;
pub mod error;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod solvers;

pub use error::{Error, Result};
