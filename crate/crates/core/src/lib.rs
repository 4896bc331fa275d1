//! Latent-space multi-objective Bayesian optimization for discrete sequences.

pub mod acquisition;
pub mod baselines;
pub mod bench;
pub mod dae;
pub mod gp;
pub mod gradcheck;
pub mod lambo;
pub mod params;
pub mod pareto;
pub mod seq;
pub mod tape;
pub mod tensor;
