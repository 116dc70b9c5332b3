//! Files the tools read and write: corpora, checkpoints and run configs.

pub mod checkpoint;
pub mod corpus;
pub mod runconfig;

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use corpus::Corpus;
pub use runconfig::RunConfig;
