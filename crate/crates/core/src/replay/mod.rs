//! Experience stores: the transformer's trajectory buffer and the world
//! model's sequence dataset.

mod buffer;
mod dataset;
pub mod file;
mod rtg;
mod trajectory;

pub use buffer::{EvictionPolicy, SampledWindow, TrajectoryBuffer};
pub use dataset::{SequenceDataset, SequenceWindow};
pub use rtg::compute_rtg;
pub use trajectory::{Source, Trajectory};
