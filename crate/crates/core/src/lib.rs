//! Training-free scene-graph question answering over 360° panoramas.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`geom`]: pure unit-sphere math — pixel/angle mappings for the
//!   equirectangular (ERP) and cubemap (CMP) projections, the entity-centering
//!   rotation matrix, pair centers, and the pixel-to-view mapping.
//! - [`reproject`]: image resampling built on `geom` — ERP↔CMP conversion,
//!   spherical rotation of panoramas, box transport between frames, crops,
//!   and annotated overlays with a legend strip.
//! - [`graph`]: the typed scene graph (entity nodes, the six fixed view
//!   nodes, attribute / inter-entity / entity-view / inter-view relations)
//!   and its deterministic textual serialization.
//! - [`backend`]: the pluggable model interface — an OpenAI-compatible HTTP
//!   client and a deterministic scripted mock, selected by name from a
//!   registry.
//! - [`pipeline`]: the four-step scene-graph generation plus graph-based
//!   question answering, with the crop / rotate / entity-view ablation
//!   switches.
//! - [`bench`]: dataset ingestion, cyclic answer permutation, the evaluation
//!   loop over pluggable answering strategies, and report generation.

pub mod backend;
pub mod bench;
pub mod geom;
pub mod graph;
pub mod pipeline;
pub mod reproject;

// Consumers handle raster buffers through these types.
pub use image;
