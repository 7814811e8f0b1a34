pub mod config;
pub mod image;
pub mod json;
pub mod weights;
