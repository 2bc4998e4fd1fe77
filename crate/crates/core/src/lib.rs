pub mod ddqn;
pub mod error;
pub mod gridworld;
pub mod nnet;
pub mod oracle;
pub mod vinnet;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
