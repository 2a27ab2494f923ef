//! Complex wavelet scattering with phase collapses.
//!
//! The crate builds Morlet filter banks ([`filterbank`]), applies the wavelet
//! operator `W` on periodic complex feature maps ([`tensor_ops`]), provides the
//! modulus and phase-preserving amplitude reductions ([`nonlin`]), assembles
//! plain and learned scattering networks ([`network`]), trains them with SGD
//! ([`learn`]), and numerically certifies the identities and bounds the
//! architecture rests on ([`theory`]). File formats live in [`io`].
//!
//! The guide in `book/` walks through each piece; its code blocks are compiled
//! and run as doctests of this crate.

pub mod error;
pub mod fft;
pub mod filterbank;
pub mod io;
pub mod learn;
pub mod linalg;
pub mod network;
pub mod nonlin;
pub mod rng;
pub mod tensor_ops;
pub mod theory;

pub use error::{Error, Result};
pub use num_complex::Complex64;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/filters.md")]
    mod filters {}
    #[doc = include_str!("../../../book/src/wavelet_operator.md")]
    mod wavelet_operator {}
    #[doc = include_str!("../../../book/src/nonlinearities.md")]
    mod nonlinearities {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
