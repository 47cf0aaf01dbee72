//! Kinematics, dynamics and constraint sets for a team of mobile manipulators
//! rigidly grasping a common object.
//!
//! Every model is generic over the scalar type ([`Real`]); the `*64` aliases
//! fix it to `f64`, which is what the controller and simulator use.

pub mod agent;
pub mod constraints;
pub mod coupled;
pub mod error;
pub mod object;
pub mod real;
pub mod spatial;

pub use error::{ModelError, ModelResult};
pub use real::Real;

pub type EulerAngles64 = spatial::EulerAngles<f64>;
pub type Ellipsoid64 = spatial::Ellipsoid<f64>;
pub type AgentParams64 = agent::AgentParams<f64>;
pub type AgentState64 = agent::AgentState<f64>;
pub type AgentLimits64 = agent::AgentLimits<f64>;
pub type ObjectParams64 = object::ObjectParams<f64>;
pub type ObjectPose64 = object::ObjectPose<f64>;
pub type ObjectTwist64 = object::ObjectTwist<f64>;
pub type CoupledTerms64 = coupled::CoupledTerms<f64>;
pub type ErrorState64 = coupled::ErrorState<f64>;
pub type ConstraintResiduals64 = constraints::ConstraintResiduals<f64>;
pub type TerminalSetParams64 = constraints::TerminalSetParams<f64>;
