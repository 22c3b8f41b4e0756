pub mod balance;
pub mod cli;
pub mod corpus;
pub mod data;
pub mod dss;
pub mod error;
pub mod hippo;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod selftest;
pub mod serial;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
