//! Grocery-product recognition engine.
//!
//! Reference images of catalog products are embedded into unit-norm
//! descriptors by a small convolutional network trained with a triplet
//! ranking loss ([`embedder`]). Descriptors live in a searchable database
//! ([`store`]). Shelf-photo region proposals ([`detect`]) are cropped,
//! embedded, and matched by exact nearest-neighbor search, then optionally
//! refined by local-feature re-ranking, macro-category majority filtering,
//! and a distance-ratio ambiguity test ([`refine`]). Results are scored
//! against ground truth under two annotation protocols ([`eval`]).

pub mod augment;
pub(crate) mod binfmt;
pub mod detect;
pub mod embedder;
pub mod eval;
pub mod error;
pub mod img;
pub mod refine;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
