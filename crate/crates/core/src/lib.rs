pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod cloud;
pub mod error;
pub mod init;
pub mod io;
pub mod morton;
pub mod nn;
pub mod octconv;
pub mod octree;
pub mod par;
pub mod partition;
pub mod reference;
pub mod runconfig;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
