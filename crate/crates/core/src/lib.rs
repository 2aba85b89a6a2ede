pub mod attention;
pub mod chain;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod learn;
pub mod numeric;
pub mod plot;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ccmc.md")]
    mod ccmc {}
    #[doc = include_str!("../../../book/src/equivalence.md")]
    mod equivalence {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/collapse.md")]
    mod collapse {}
    #[doc = include_str!("../../../book/src/positional.md")]
    mod positional {}
    #[doc = include_str!("../../../book/src/lab.md")]
    mod lab {}
}
