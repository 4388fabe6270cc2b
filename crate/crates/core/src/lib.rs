//! Region-constrained counterfactual explanations by classifier-guided
//! bridge inpainting, on synthetic blob images.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod regions;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use numerics::Tensor;
pub use regions::RegionMask;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    mod bridge {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
