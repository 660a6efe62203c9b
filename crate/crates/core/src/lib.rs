pub mod bench;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod lqr;
pub mod optimizer;
pub mod parallel;
pub mod points;
pub mod reference;
pub mod stein;
pub mod sinkhorn;
pub mod tsp;

pub use error::{Error, Result};
