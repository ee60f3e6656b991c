pub mod cli;
pub mod data;
pub mod diffcore;
pub mod evaluation;
pub mod exec;
pub mod forecaster;
pub mod marketfactor;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod stockfactor;
