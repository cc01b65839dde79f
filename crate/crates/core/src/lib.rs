pub mod cli;
pub mod config;
pub mod crystal;
pub mod error;
pub mod imaging;
pub mod lattice;
pub mod linalg;
pub mod micromotion;
pub mod modes;
pub mod optimize;
pub mod output;
pub mod stats;
pub mod thermometry;
pub mod units;
