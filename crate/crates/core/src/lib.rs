//! Conditional latent diffusion from EEG to cortical BOLD maps.

pub mod bold_latent;
pub mod denoiser;
pub mod diffusion;
pub mod eeg_cond;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod synthgen;
pub mod tape;

pub use error::{CatdError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/eeg-conditioning.md")]
    mod eeg_conditioning {}
    #[doc = include_str!("../../../book/src/latent-space.md")]
    mod latent_space {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
