//! Desk-scale learning tasks: synthetic and CSV data, label-skew
//! partitioning, softmax models with hand-derived gradients.

mod data;
mod model;
mod partition;

pub use data::{
    generate_synthetic, generate_synthetic_with, load_csv, parse_csv, Dataset, DEFAULT_SEPARATION,
};
pub use model::{batch_gradient, evaluate, local_train, loss, Arch, ModelParams, TrainArgs};
pub use partition::{partition, PartitionSpec};
