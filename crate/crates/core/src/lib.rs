//! Two-agent image description game with an emergent discrete language.
//!
//! Two neural agents alternate as teacher and learner. The teacher sees an
//! image, composes a short symbol message by searching its own listening
//! model (the obverter step), and the learner must judge from its own image
//! and the message whether both agents are looking at the same kind of
//! object. Everything runs on a small reverse-mode tensor tape: the
//! convolutional perception stack, the GRU message reader, and the decision
//! head are trained end to end from pixels.
//!
//! The crate also ships a meaning-vector population game (a replication of
//! the classic negotiated-communication experiment) and the evaluation
//! machinery used to study the learned codes: accuracy matrices, zero-shot
//! transfer, message tables, perplexity and Jaccard statistics.

pub mod agent;
pub mod arena;
pub mod batali;
pub mod error;
pub mod evalproto;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod tape;
pub mod tensor;

pub use error::CoreError;
