pub mod assign;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod model;
pub mod prompt;
pub mod raster;
pub mod scene;
pub mod teacher;

pub use error::{Error, PredictorError, Result};
pub use geometry::OrientedBox;
