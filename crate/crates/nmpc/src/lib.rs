//! Decentralized leader-follower model predictive control for a team of
//! mobile manipulators carrying a rigidly grasped object.
//!
//! - [`qp`] and [`sqp`]: dense QP and line-search SQP solvers.
//! - [`fhocp`]: single-shooting transcription of the leader and follower
//!   finite-horizon problems.
//! - [`comms`]: the priority-ordered prediction exchange of one round.
//! - [`sim`]: closed-loop plant, closure projection and run records.
//! - [`trace`]: CSV and JSON output of a run.

pub mod comms;
pub mod fhocp;
pub mod ode;
pub mod qp;
pub mod sim;
pub mod sqp;
pub mod trace;
