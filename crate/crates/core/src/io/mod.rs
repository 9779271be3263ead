//! Plain-text and PLY file formats shared by the pipeline and the CLI.

pub mod kv;
pub mod ply;
