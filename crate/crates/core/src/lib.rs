//! Bias detection toolkit: lexicon and rule based corpus labelling, the
//! dual-encoder detector with its training loop, annotation review with
//! inter-annotator agreement, and evaluation metrics.

pub mod agreement;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod lexicon;
pub mod model;
pub mod review;
pub mod text;
pub mod training;

pub use error::{Error, Result};
