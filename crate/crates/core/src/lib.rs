//! Tract-specific diffusion MRI analysis.
//!
//! The crate covers the full desk-scale pipeline: NIfTI volume I/O, diffusion
//! tensor fitting (FA/MD), constrained spherical deconvolution into fiber
//! orientation distributions, rigid/affine and demons-style nonlinear
//! registration (scalar and FOD metrics, with FOD reorientation), iterative
//! population template and tract-atlas construction, a classic mean-FA
//! skeleton baseline, per-tract statistics, and a synthetic phantom cohort
//! generator used to benchmark reproducibility and robustness.
//!
//! # Conventions
//!
//! * Voxel data is stored row-major over `(i, j, k)`: `k` varies fastest,
//!   `idx = (i * ny + j) * nz + k`. Multi-channel volumes interleave channels
//!   per voxel (`idx * channels + c`).
//! * Voxel index `(i, j, k)` maps to physical millimetres through the grid
//!   affine as `affine * (i, j, k, 1)`.
//! * Computation is performed in `f64`; NIfTI files are written as `float32`.
//!   The container and interpolation layers are generic over the scalar type
//!   (`num_traits::Float`), with the concrete aliases below used everywhere
//!   else in the crate.
//! * Displacement fields are pull-back maps in millimetres: a field on grid
//!   `G` sends a point `x` in `G`'s space to `x + u(x)` in the source image's
//!   space, and warping samples the source there.
//! * Spherical harmonics use the real, even-order, orthonormal basis in
//!   `(l, m)` order with `l = 0, 2, ..lmax` ascending and `m = -l..l`
//!   (see [`sh`] for the exact functions).

pub mod atlas;
pub mod csd;
pub mod dwi;
pub mod error;
pub mod field;
pub mod filter;
pub mod gradients;
pub mod grid;
pub mod nifti;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod sh;
pub mod sphere;
pub mod stats;
pub mod tbss;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use grid::ImageGrid;
pub use volume::{Series, Volume};

/// One value per voxel, `f64`.
pub type ScalarVolume = Volume<f64>;
/// `channels` values per voxel, `f64`.
pub type SeriesVolume = Series<f64>;
/// One boolean per voxel.
pub type BinaryMask = Volume<bool>;
