pub mod chain;
pub mod codec;
pub mod consensus;
pub mod digest;
pub mod ids;
pub mod rng;
pub mod community;
pub mod strategies;
pub mod archive;
pub mod shutdown;
pub mod scenario;
pub mod engine;
pub mod batch;
