//! Joint design of belt gear ratios and motion for a parallel belt-driven
//! manipulator.
//!
//! The outer loop ([`cmaes`], driven by [`codesign`]) searches gear ratios; the
//! inner loop ([`ocp`] + [`solver`]) plans a minimum-cost point-to-point motion
//! either in joint space (tree model, motor limits mapped through the coupling
//! matrix) or in actuation space (motor torques as controls).

pub mod cli;
pub mod cmaes;
pub mod codesign;
pub mod dynamics;
pub mod model;
pub mod ocp;
pub mod solver;
pub mod spatial;
