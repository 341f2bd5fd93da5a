//! Cross-domain place recognition with nearest-neighbour scene descriptors.
//!
//! Local features of query and database images are explained by their exact
//! nearest neighbours in a library of raw features collected in other
//! domains (seasons, routes). Database explanations go into an inverted file;
//! queries are scored image-to-class with a spatial pyramid kernel.
//!
//! Pipeline: [`library::build_library`] -> [`descriptor::describe_all`] ->
//! [`index::build_index`] -> [`matcher::rank`]. [`bow`] holds the TF-IDF
//! comparator and [`eval`] the metrics, synthetic worlds and experiment
//! runner.

mod binio;

pub mod bow;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod knn;
pub mod library;
pub mod matcher;
pub mod model;

pub use descriptor::{describe_database, describe_query, Entry, FeatureRecord, Role, SceneDescriptor};
pub use error::{Error, Result};
pub use index::{build_index, InvertedIndex, Posting};
pub use knn::{mine, truncated_similarity, NNExplanation, Neighbor};
pub use library::{build_library, ExperienceLibrary, LibraryId, VocabFilter, VocabKind};
pub use matcher::{rank, RankedEntry, RankedResult};
pub use model::{cell_of, DomainLabel, Feature, ImageRecord, MinerConfig, Point, PyramidConfig, Season};
