pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod noise;
pub mod quadrature;
pub mod statistics;
pub mod stokes;
