//! Synthetic and file-backed spike datasets.

pub mod randman;
pub mod raster;

pub use randman::{Encoding, Randman, RandmanSpec};
pub use raster::{read_raster, split_train_valid, write_raster, EncodingTag, RasterHeader};
