//! Emotion and cause recognition over multi-turn conversations.
//!
//! Conversations become small weighted graphs (one node per utterance) whose
//! node features combine sentence embeddings, utterance statistics, and the
//! embeddings of each utterance's top TF-IDF words. A two-layer graph
//! convolutional network with mean readout feeds a shared linear head that is
//! split into an emotion softmax and a causality softmax.

pub mod bilm;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod gcnnet;
pub mod graphbuild;
pub mod tensor;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
