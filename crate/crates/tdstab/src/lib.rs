pub mod network;
pub mod phasor;
pub mod powerflow;
pub mod cases;
pub mod measurement;
pub mod estimator;
pub mod indices;
pub mod monitor;
pub mod cli;
