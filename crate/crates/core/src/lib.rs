//! Fine-grained dialect identification at the city, state, and country
//! levels, built around a hierarchical-attention multi-task BiGRU network.
//!
//! The crate is organized bottom-up:
//!
//! * [`corpus`] — tweet normalization, filtering, tokenization, vocabulary,
//!   encoding, splitting, and a synthetic corpus generator.
//! * [`geo`] — city → state → country hierarchy and gold-user filtering.
//! * [`autograd`] — dense-tensor reverse-mode differentiation, Adam, dropout.
//! * [`layers`] — embedding, GRU/BiGRU, multi-head attention, pooling, heads.
//! * [`models`] — the five architectures and the multi-task loss.
//! * [`training`] — supervised training with early stopping, self-training,
//!   and the weak-supervision regimes.
//! * [`evaluation`] — accuracy / macro-F1 metrics and user-level voting.

pub mod autograd;
pub mod corpus;
pub mod evaluation;
pub mod geo;
pub mod layers;
pub mod models;
pub mod training;

pub use corpus::{LabelTriple, TweetRecord, Vocabulary};
pub use geo::LocationHierarchy;
pub use models::{Model, ModelSpec, Task, Variant};
