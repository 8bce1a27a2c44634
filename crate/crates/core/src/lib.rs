//! Collective-spin simulation of squeezing generated by a one-axis twisting
//! Hamiltonian under continuous dynamical-decoupling (DD) fields.
//!
//! Everything lives in the symmetric `J = N/2` sector of `N` spins, so states
//! are vectors over the `N + 1` Dicke states `|J, m>` ordered by ascending `m`.
//!
//! The numerical core is generic over the real scalar type (see [`Real`]);
//! the `*64` aliases at the crate root fix it to `f64`, which is what the
//! experiment drivers use.

// `!(x <= tol)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dynamics;
mod error;
pub mod experiments;
pub mod hamiltonians;
pub mod noise;
pub mod scalar;
pub mod spin;
pub mod squeezing;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Complex<T> = num_complex::Complex<T>;

pub type Operator64 = spin::Operator<f64>;
pub type PureState64 = spin::PureState<f64>;
pub type CollectiveOperators64 = spin::CollectiveOperators<f64>;
pub type ControlParams64 = hamiltonians::ControlParams<f64>;
pub type OuParams64 = noise::OuParams<f64>;
pub type NoisePath64 = noise::NoisePath<f64>;
pub type SpinMoments64 = dynamics::SpinMoments<f64>;
pub type TrajectoryMoments64 = dynamics::TrajectoryMoments<f64>;
pub type SqueezingSample64 = squeezing::SqueezingSample<f64>;

pub type Operator32 = spin::Operator<f32>;
pub type PureState32 = spin::PureState<f32>;
