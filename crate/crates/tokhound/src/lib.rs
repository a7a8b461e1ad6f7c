//! tokhound finds under-trained ("glitch") tokens in language models.
//!
//! The pipeline: load a tokenizer ([`tokenizer`]), classify every token by
//! testability ([`taxonomy`]), rank tokens by embedding-geometry indicators
//! ([`embeddings`], [`indicators`]), then verify the lowest-ranked candidates
//! by prompting a model and checking it cannot repeat them ([`verify`]).
//! [`pipeline`] chains the stages into reproducible on-disk artifacts and
//! [`report`] renders the result.

pub mod embeddings;
pub mod fixture;
pub mod indicators;
mod io_util;
pub mod pipeline;
pub mod report;
pub mod taxonomy;
pub mod tensor;
pub mod tokenizer;
pub mod verify;
