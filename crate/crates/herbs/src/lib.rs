pub mod backbone;
pub mod bs;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod neck;
pub mod net;
pub mod nn;
pub mod refinement;
pub mod train;

pub use error::{HerbsError, Result};
