//! Brain-graph data model: connectivity matrices, populations, on-disk
//! layout, subject splits and a synthetic population generator.

mod connectome;
mod dataset;
mod simulate;

use std::path::PathBuf;

use thiserror::Error;

pub use connectome::{
    devectorize, devectorize_index, feature_count, roi_count_for_features, vectorize_upper,
    ConnectivityMatrix,
};
pub use dataset::{
    fold_train_test, format_f64, kfold, load_dataset, matrix_to_csv, ratio_split, read_connectivity_csv,
    read_matrix_csv, split, write_dataset, DatasetDims, FeatureMatrix, PopulationDataset, Split,
    SplitMode, TrainTest, ViewRole, MANIFEST_FILE,
};
pub use simulate::{simulate_population, SimulatedPopulation, SimulationParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid connectivity matrix: {0}")]
    Validation(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("cannot ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
