pub mod analysis;
pub mod cli;
pub mod classify;
pub mod error;
pub mod io_util;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod rl;
pub mod seqcore;
pub mod synthetic;

pub use error::{Error, Result};
