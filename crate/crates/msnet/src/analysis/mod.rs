pub mod bench;
pub mod cost;
pub mod diversity;
pub mod erf;
