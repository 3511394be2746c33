//! Co-channel speaker identification on magnitude spectrograms: a source
//! extractor, Siamese speaker classifiers, their losses, and the
//! three-stage training schedule.

pub mod classifier;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod extractor;
pub mod layers;
pub mod objectives;
pub mod selfcheck;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
