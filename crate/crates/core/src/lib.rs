pub mod analyzer;
pub mod annotate;
pub mod embed;
pub mod error;
pub mod eval;
pub mod index;
pub mod matcher;
pub mod model;
pub mod query;
pub mod train;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets stay honest.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/embeddings.md")]
    pub struct Embeddings;
    #[doc = include_str!("../../../book/src/highlighting.md")]
    pub struct Highlighting;
    #[doc = include_str!("../../../book/src/matching.md")]
    pub struct Matching;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/annotations.md")]
    pub struct Annotations;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/index-and-cli.md")]
    pub struct IndexAndCli;
}
