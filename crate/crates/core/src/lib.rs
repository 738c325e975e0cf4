//! Automated design of silicon dangling-bond logic gates with double-deep
//! Q-learning.
//!
//! An agent places dangling bonds one at a time on a design canvas; every
//! placement is scored by simulating the electrostatic ground state of the
//! layout for each row of the target truth table.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod io_cli;
pub mod lattice;
pub mod logic;
pub mod physics;
pub mod qnet;

pub use error::{Error, Result};
