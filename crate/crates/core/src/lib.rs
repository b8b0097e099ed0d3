//! Core engine: content-addressed storage, pipeline definitions, the
//! dependency graph and executor, revision history, experiments, lazy
//! node loading and directory remotes.

pub mod cas;
pub mod error;
pub mod executor;
pub mod experiments;
pub mod graph;
pub mod nodeload;
pub mod pipeline;
pub mod project;
pub mod remote;
pub mod revstore;

pub use cas::{CheckoutMode, Content, ObjectId, ObjectStore};
pub use error::{Error, Result};
pub use executor::{Executor, RunOptions, RunReport, StageState};
pub use graph::{build_graph, topo_sort, Graph};
pub use pipeline::{ParamTree, ParamValue, PipelineDef, StageDef};
pub use project::Project;
pub use nodeload::{AttrValue, NodeHandle};
pub use remote::Remote;
