//! Variable-step BDF2 with deferred correction.

pub mod adaptive;
pub mod bench;
pub mod doc_diagnostics;
pub mod error;
pub mod implicit_solver;
pub mod mesh;
pub mod problems;
pub mod schemes;
pub mod starters;

pub use error::{Error, Result};
