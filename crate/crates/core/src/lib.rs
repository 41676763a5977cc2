//! Contour alignment by direct minimization of a shape-aware Chamfer bound.
//!
//! The core types are generic over the scalar ([`Real`], implemented for
//! `f32` and `f64`); the aliases at the crate root fix `f64`, which is what the
//! command-line tool and the evaluation harness use.

pub mod align;
pub mod edt;
pub mod eval;
pub mod error;
pub mod loss;
pub mod num;
pub mod objective;
pub mod raster;
pub mod shape;
pub mod simulate;
pub mod warp;

pub use error::{Error, Result};
pub use num::Real;
pub use objective::{loss_grad, Direction, Family, GradMode};

pub type ContourImage = raster::ContourImage<f64>;
pub type ScalarGrid = raster::ScalarGrid<f64>;
pub type DistanceField = edt::DistanceField<f64>;
pub type WarpField = warp::WarpField<f64>;
pub type AffineParams = warp::AffineParams<f64>;
pub type TpsParams = warp::TpsParams<f64>;
pub type TpsControlGrid = warp::TpsControlGrid<f64>;
pub type PairContext = loss::PairContext<f64>;
