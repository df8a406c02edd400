pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matchloss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod predict;
pub mod queryselect;
pub mod rle;
pub mod segbranch;
pub mod synthdoc;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
