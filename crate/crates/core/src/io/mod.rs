//! Images, Bayer mosaics, weights files and model configuration files.

pub mod bayer;
pub mod config;
pub mod image;
pub mod weights;
