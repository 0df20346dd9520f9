//! Hotel review classification toolkit.
//!
//! Reviews are labelled `Bad`, `Good` or `Excellent`. The crate provides a
//! word-level tokenizer, a TF-IDF + softmax-regression baseline, a small
//! transformer encoder with hand-written backward passes, a validation-driven
//! training loop (learning-rate decay on plateaus with rollback to the best
//! weights), layer freezing, and a per-hotel score store used for ranking.

pub mod corpus;
pub mod encoder;
pub mod numerics;
pub mod recommender;
pub mod rng;
pub mod tfidf;
pub mod tokenizer;
pub mod vtrain;

mod error;

pub use corpus::{DatasetSplit, Label, LabeledReview};
pub use encoder::{EncoderConfig, EncoderWeights, FreezePolicy, Pooling};
pub use error::Error;
pub use tokenizer::{TokenSequence, Vocabulary};
pub use vtrain::{EpochReport, Metrics, TrainConfig};
