//! Annotation text files, the binary tensor format and heatmap images.

pub mod dota;
pub mod render;
pub mod tensor_file;
