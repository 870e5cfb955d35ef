//! Aggregation of gridded climate variables to administrative regions.
//!
//! The pipeline has three stages:
//!
//! 1. **Selection**: climate rasters ([`grid`]), administrative boundaries
//!    ([`geom`]) and a socio-economic proxy grid.
//! 2. **Computation of weights**: [`weights`] turns population density or
//!    night-light radiance into a per-cell [`weights::WeightGrid`].
//! 3. **Aggregation**: [`zonal`] reduces every frame to one value per region,
//!
//!    ```text
//!    y_i = Σ_j a_j f_ij w_j x_j / Σ_j a_j f_ij w_j
//!    ```
//!
//!    where `a_j` is the spherical cell area, `f_ij` the share of cell `j`
//!    inside region `i` and `w_j` the weight of cell `j`.
//!
//! [`temporal`] converts frequencies and counts threshold exceedances, and
//! [`catalog`] persists and exports the resulting tables.

pub mod catalog;
pub mod error;
pub mod fixtures;
pub mod geom;
pub mod grid;
pub mod sum;
pub mod temporal;
pub mod weights;
pub mod zonal;

pub use error::{Error, Result};
