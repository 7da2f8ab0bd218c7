//! Few-shot node classification with a frozen graph transformer.
//!
//! The pipeline: pretrain a small graph transformer on label-free pretexts
//! ([`pretrain`]), adapt it per task by tuning a block of virtual-node
//! prompt rows ([`vnt`]), transfer prompt knowledge from source tasks with
//! an attention-based refinement module ([`gppe`]), and score everything
//! with a seeded evaluation harness ([`eval`]).

pub mod checkpoint;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gppe;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod positional;
pub mod ppr;
pub mod pretrain;
pub mod rng;
pub mod sampling;
pub mod toy;
pub mod vnt;

pub use encoder::{GTModel, ModelConfig, NodeInputs};
pub use error::{Error, Result};
pub use graph::{load_dataset, ClassSplit, Graph, SplitPart};
pub use sampling::{FewShotTask, SourceTaskSet, TaskShape};
