//! Joint prediction of the ADAS-Cog 13 global score and its thirteen item
//! scores from baseline MRI and early clinical assessments.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod clinical;
pub mod evaluation;
pub mod explain;
pub mod imaging;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod util;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    mod preprocessing {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    mod attribution {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
