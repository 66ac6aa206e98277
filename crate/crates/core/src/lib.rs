//! Bag-of-words place recognition and relocalization for descriptors of any
//! kind: float (learned) or binary (ORB-style).
//!
//! The pipeline runs from [`preprocess`] (thermal image enhancement) through
//! [`vocab`] (vocabulary tree), [`index`] (inverted-file database) and
//! [`loopdet`] (candidate selection and geometric verification) to [`map`]
//! (relocalization against a keyframe map). [`simgen`] generates synthetic
//! worlds with day-night appearance drift, and [`eval`] holds the evaluation
//! protocols and benchmarks.

pub mod descriptor;
pub mod eval;
pub mod format;
pub mod geom;
pub mod index;
pub mod io;
pub mod loopdet;
pub mod map;
pub mod preprocess;
pub mod rng;
pub mod simgen;
pub mod vocab;

pub use descriptor::{Descriptor, DescriptorError, DescriptorKind, DescriptorSet, Keypoint, Signature};
pub use eval::{EvalError, EvalRecord, RecallSummary};
pub use format::FormatError;
pub use geom::{GeomError, Intrinsics, Pose};
pub use index::{BowVector, FeatureVector, ImageDatabase, IndexError};
pub use loopdet::{LoopDetector, LoopError, LoopMode, LoopParams, LoopResult, LoopStatus};
pub use map::{MapError, MapFile, RelocParams, RelocRecord, RelocStatus};
pub use preprocess::PreprocessError;
pub use simgen::{Scenario, SimError};
pub use vocab::{VocabError, Vocabulary};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
