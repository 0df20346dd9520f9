use thiserror::Error;

use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::numerics::NumericsError;
use crate::recommender::StoreError;
use crate::tfidf::TfidfError;
use crate::tokenizer::TokenizerError;
use crate::vtrain::TrainError;

/// Union of the per-module errors, for callers that drive whole pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tfidf(#[from] TfidfError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
