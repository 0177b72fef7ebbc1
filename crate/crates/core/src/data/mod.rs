//! Synthetic data, client partitioning and class-incremental task streams.

mod dataset;
pub mod io;
mod partition;
mod stream;

pub use dataset::{generate_dataset, stack_features, Dataset, DatasetSpec, LabeledSample};
pub use partition::{
    consensus_split, partition, partition_asynchronous, partition_synchronous,
    realized_consensus, ClientShard, PartitionConfig, PartitionMode,
};
pub use stream::{build_task_stream, class_order, round_to_task, Task, TaskStream};
