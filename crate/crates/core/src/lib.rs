//! Continuous-time flow models trained with flow matching or with an
//! adversarial objective on discriminator Jacobian-vector products, together
//! with analytic Gaussian-mixture oracles for checking them.

pub mod autodiff;
pub mod eval;
pub mod flowpath;
pub mod models;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod trainer;

pub use params::{GradientMap, Parameters};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/flow-matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/cafm.md")]
    mod cafm {}
    #[doc = include_str!("../../../book/src/afm.md")]
    mod afm {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
