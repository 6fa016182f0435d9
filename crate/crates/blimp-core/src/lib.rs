//! Flight dynamics and system identification for a small winged blimp.
//!
//! The vehicle operates in two aerodynamic regimes: fast, low-incidence
//! flight where classical lift/drag polynomials in (α, β) hold, and slow or
//! high-incidence flight where a velocity-damping model is the better fit.
//! This crate implements both force models, a hybrid 6-DOF simulator that
//! blends them through a learned mixing weight λ(α, V), and the offline
//! pipeline that identifies the physical coefficients and the mixer from
//! motion-capture trajectories.

pub mod aero;
pub mod dataio;
pub mod dynamics;
pub mod ident;
pub mod mathcore;
pub mod mixer;
pub mod rigidbody;
pub mod synth;

pub use mathcore::{Mat3, Mat6, Vec3, Vec6};
