//! Spin-dependent Bohmian arrival times in a cylindrical waveguide and the
//! flat-foliation detection and signaling protocols built on them.

pub mod cli;
pub mod ensemble;
pub mod fields;
pub mod protocol;
pub mod spacetime;
pub mod trajectories;
