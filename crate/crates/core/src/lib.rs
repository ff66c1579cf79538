pub mod bench;
pub mod cli;
pub mod config;
pub mod constraints;
pub mod controller;
pub mod error;
pub mod increment;
pub mod integrator;
pub mod models;
pub mod system;
pub mod validate;
