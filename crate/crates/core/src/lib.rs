//! Multilingual automatic post-editing: corpora, augmentation, metrics,
//! QE annotation, a dual-encoder model, multitask training and evaluation.

pub mod augment;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod losses;
pub mod model;
pub mod qe;
pub mod toy;
pub mod trainer;

pub use corpus::{ApeTriplet, Corpus, LangId, Origin, ParallelPair, Split};
pub use error::{Error, Result};
pub use metrics::{EditTrace, MetricReport};
pub use qe::{QeAnnotation, Tag};
