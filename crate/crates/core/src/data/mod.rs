//! Synthetic AU-conditioned optical-flow data.

mod dataset;
mod gen;
mod layout;

pub use dataset::{partition_clients, split_train_test, Dataset, Split, DATASET_MAGIC, DATASET_VERSION};
pub use gen::{strain, Generator, GeneratorSpec, Prototype, Sample};
pub use layout::{Landmark, Part, RoiLayout};
