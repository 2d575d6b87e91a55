//! Invertible building blocks: coordinatewise maps, rotations and chains.

mod affine;
mod chain;
pub(crate) mod dual;
mod map;
mod rotation;
mod serialize;
mod spline;

pub use affine::AffineMap;
pub use chain::{
    pullback_log_density, pullback_score, ChainTarget, RotatedTarget, TransportChain, TransportLayer,
};
pub use map::{CoordMap, ParamGrads};
pub use rotation::{Rotation, ORTHOGONALITY_TOL, UNIT_NORM_TOL};
pub use serialize::{chain_from_json, chain_from_value, chain_to_json, chain_to_value, CHAIN_FORMAT_VERSION};
pub use spline::{identity_raw_derivative, CoordGrads, RqSpline, MIN_BIN_FRACTION, MIN_DERIVATIVE};

#[cfg(test)]
pub(crate) use spline::tests::random_spline;
