//! Story-to-3D-book pipeline: keyword extraction, model generation,
//! plausibility review and book assembly.

pub mod assembler;
pub mod config;
pub mod forge;
pub mod gate;
pub mod ingest;
pub mod narrative;
pub mod pipeline;
pub mod providers;
pub mod store;
