pub mod acquisition;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod evidence;
pub mod gp;
pub mod harness;
pub mod surrogate;
pub mod math;
pub mod optim;
pub mod posterior;
pub mod simulators;

pub use error::{Error, Result};
