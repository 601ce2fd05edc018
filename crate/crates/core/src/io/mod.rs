//! File formats and model persistence.

mod checkpoint;
mod dataset;
mod tables;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_model, save_model, Fingerprint, ModelCheckpoint,
    FORMAT_VERSION,
};
pub use dataset::{
    load_dataset, load_dataset_dir, read_adjacency, read_matrix, read_rows, save_dataset, write_adjacency,
    write_matrix, write_rows, ADJACENCY_FILE, MATRIX_MAGIC, ROWS_FILE, VALUES_FILE,
};
pub use tables::*;
