//! Numerical toolkit for global diffusion on the invariant three-sphere of a
//! pair of non-harmonic oscillators weakly coupled to a pendulum.
//!
//! The low-level modules ([`model`], [`integrate`], the arc arithmetic of
//! [`czindex`]) are generic over the scalar type; everything built on top of
//! shooting, quadrature and window search works in `f64`.

pub mod czindex;
pub mod integrate;
pub mod manifold;
pub mod melnikov;
pub mod model;
pub mod section;
pub mod windows;

mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Float;

pub type Params = model::ModelParams<f64>;
pub type State = model::PhaseState<f64>;
pub type Pert = model::Perturbation<f64>;
pub type ActionAngle = model::ActionAngle<f64>;
pub type Arc = czindex::SymplecticArc<f64>;


pub type Params32 = model::ModelParams<f32>;
pub type State32 = model::PhaseState<f32>;
