//! Lays out a whole sequence of graphs in one shared visualization space.
//!
//! The pipeline groups the nodes of every phase, measures how similar the
//! groups of all phases are to each other, embeds every group into one common
//! vector space, projects that space to 2D (and 1D for alluvial charts) and
//! extracts inter-temporal lineages. The result is a JSON [`artifact`] that a
//! static viewer can render.
//!
//! ```text
//! graph_io -> grouping -> metagraph -> similarity -> embedding -> projection
//!                                                 \-> lineage ----------/-> artifact
//! ```

pub mod artifact;
pub mod embedding;
pub mod error;
pub mod graph_io;
pub mod grouping;
pub mod lineage;
pub mod metagraph;
pub mod projection;
pub mod similarity;
pub mod synthgen;

pub use error::{Error, Result};
pub use graph_io::{GraphSequence, MetadataTable, NodeId, PhaseGraph};
pub use grouping::Partition;
pub use metagraph::{GroupId, MetaGraph, MetaGraphSequence};
pub use similarity::SimilarityMatrix;
