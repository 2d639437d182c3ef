//! Persistence: binary checkpoint containers, run configuration, record
//! writers and chart rendering.

pub mod config;
pub mod container;
pub mod plot;
pub mod records;

pub use config::{DataConfig, RunConfig};
pub use container::{
    load_model, load_tokenizer, save_model, save_tokenizer, MODEL_MAGIC, TOKENIZER_MAGIC,
};
