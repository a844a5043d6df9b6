//! Spectral function-space gradient descent for Dirichlet elliptic problems,
//! coefficient-perturbation certificates, and expression-graph audits of the
//! networks that simulate each descent iterate.

pub mod field;
pub mod grid;
pub mod linalg;
pub mod operator;
pub mod report;
pub mod spectral;
pub mod descent;
pub mod perturb;
pub mod exprgraph;
pub mod config;
pub mod pipeline;
