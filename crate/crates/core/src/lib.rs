//! Multi-shell diffusion signal representation and learned FOD estimation.
//!
//! Signals are expanded in the SHORE basis with a data-optimized scale ζ, a
//! residual MLP maps signal coefficients to FOD coefficients in log space,
//! and predictions are scored with the angular correlation coefficient. A
//! multi-tensor phantom supplies paired signals and ground-truth FODs.

pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod net;
pub mod nonneg;
pub mod phantom;
pub mod sh;
pub mod shore;
pub mod sphere;
pub mod stats;

pub use error::{Error, Result};
pub use sh::{acc, ShSeries};
pub use shore::{QSpaceSamples, ShoreFitConfig, ShoreSeries};
pub use sphere::{DirectionSet, Rotation};
