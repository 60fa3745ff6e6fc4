//! Learning compact neural-network flight policies from Robust Tube MPC
//! experts via tube-guided data augmentation.
//!
//! The crate is organized around two expert pipelines:
//!
//! * a **linear** trajectory-tracking tube MPC built on a hover-linearized
//!   multirotor model ([`linmpc`]), whose ancillary feedback gain makes data
//!   augmentation a matrix-vector product, and
//! * a **nonlinear** goal-reaching tube MPC for acrobatic (flip) maneuvers
//!   ([`nmpc`]), where augmented actions come from the parametric sensitivity
//!   of the ancillary NMPC solution.
//!
//! Supporting modules: a nonlinear multirotor simulator ([`sim`]), convex set
//! arithmetic and tube sampling ([`sets`]), a sparse operator-splitting QP
//! solver ([`qp`]), a from-scratch MLP with ADAM training ([`policy`]),
//! imitation-learning algorithms ([`imitation`]) and experiment orchestration
//! ([`experiments`]).

pub mod attitude_math;
pub mod config;
pub mod experiments;
pub mod imitation;
pub mod linmpc;
pub mod nmpc;
pub mod policy;
pub mod qp;
pub mod sets;
pub mod sim;
