//! Distributed stochastic approximation with a gossip matrix: simulation,
//! error decomposition into agreement and disagreement parts, and empirical
//! rate and law-of-the-iterated-logarithm checks, with distributed TD(0) as
//! the worked application.

pub mod decomp;
pub mod engine;
pub mod schedule;
pub mod spectral;
pub mod td;
pub mod harness;
