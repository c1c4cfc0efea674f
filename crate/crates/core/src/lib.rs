//! Evolutionary discovery of recursive state estimators.
//!
//! Candidate estimators are straight-line matrix programs ([`dsl`]). They are
//! produced by Cartesian Genetic Programming ([`cgp`]) or by a language
//! model prompted with parent programs ([`llm`]), scored by running them as
//! the per-step body of a filter over simulated trajectories ([`dynsys`],
//! [`kalman`]), and kept in per-island elite databases ([`engine`]).

pub mod cgp;
pub mod dsl;
pub mod dynsys;
pub mod engine;
pub mod kalman;
pub mod llm;
pub mod matrix;

pub use matrix::Matrix;
