//! Synthesis and verification of polynomial Lyapunov functions and coupling
//! functions certifying consensus of first- and second-order multi-agent
//! systems under jointly connected switching topologies, plus closed-loop
//! simulation of the protocols.
//!
//! Pipeline: polynomial conditions ([`conditions`]) compile through the
//! sum-of-squares layer ([`sos`]) into block semidefinite programs ([`sdp`]),
//! whose solutions come back as checkable Gram certificates. The [`sim`]
//! module integrates the closed loop over a switching schedule ([`graph`])
//! and monitors the certified Lyapunov function along trajectories.

pub mod conditions;
pub mod files;
pub mod fixtures;
pub mod graph;
pub mod poly;
pub mod sdp;
pub mod sim;
pub mod sos;

pub mod cli;
