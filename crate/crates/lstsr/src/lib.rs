//! Land surface temperature single-image super-resolution toolkit.
//!
//! The pieces, bottom up: [`synth`] makes test scenes, [`resample`] holds
//! the physical degradation model and bicubic interpolation, [`mrunet`] is
//! a multi-residual U-Net over the [`autodiff`] engine, [`train`] fits it
//! and benchmarks it against [`atprk`] and bicubic using [`metrics`], and
//! [`cli`] wires everything into the `lstsr` binary. [`raster`] is the
//! shared grid and dataset model.
//!
//! The runnable examples under `examples/` walk through the toolkit piece
//! by piece and are the best place to start; `README.md` maps them out.
//!
//! A minimal loop, no training involved:
//!
//! ```
//! use lstsr::metrics::psnr;
//! use lstsr::resample::{bicubic_upsample, norml4_downsample};
//! use lstsr::synth::{gaussian_field, FieldSpec};
//!
//! let scene = gaussian_field(&FieldSpec {
//!     width: 64,
//!     height: 64,
//!     pixel_size_m: 250.0,
//!     corr_length_m: 1500.0,
//!     min_value: 285.0,
//!     max_value: 310.0,
//!     seed: 7,
//! })?;
//! let coarse = norml4_downsample(&scene, 4)?;
//! let restored = bicubic_upsample(&coarse, 4)?;
//! let db = psnr(scene.values(), restored.values())?;
//! assert!(db > 25.0);
//! # Ok::<(), lstsr::Error>(())
//! ```

pub mod atprk;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod mrunet;
pub mod raster;
pub mod resample;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
