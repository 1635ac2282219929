pub mod manifest;
pub mod ppm;
pub mod synthetic;
