pub mod block;
pub mod cluster;
pub mod codec;
pub mod crypto;
pub mod node;
pub mod ordering;
pub mod transport;
pub mod workflow;

// Keeps the guide's snippets compiling.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ordering.md")]
    mod ordering {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/workflow.md")]
    mod workflow {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/cluster.md")]
    mod cluster {}
}
