//! Hierarchical policy optimization for linear-quadratic systems of
//! partially exchangeable agents.

pub mod decomp;
pub mod error;
pub mod gtd;
pub mod matlin;
pub mod npg;
pub mod oracle;
pub mod sim;
pub mod sysmodel;

pub use error::{Error, Result};
