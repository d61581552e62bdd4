//! Core library for automated drifting at desk scale: tyre models, the
//! single-track prediction dynamics, offline drift-equilibrium maps, a
//! real-time SQP NMPC, curvature-compensating path referencing, and a
//! deliberately mismatched double-track plant for closed-loop validation.

pub mod dynamics;
pub mod equilibria;
pub mod lm;
pub mod tyre;
