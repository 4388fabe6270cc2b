//! Command line and HTTP front ends for `bridgelab`.

pub mod commands;
pub mod service;
