//! A laboratory for quantifying how sensitive standard CNNs are to
//! translated inputs.
//!
//! The pieces: a dense tensor core with hand-written layer backward passes
//! ([`tensor`], [`nn`]), declarative architectures with shape inference and
//! the experiment presets ([`arch`]), MNIST/CIFAR-10 loading with padding
//! and translation ([`data`]), the seeded optimization protocol ([`train`]),
//! translation-sensitivity maps with radial profiles and metric correlation
//! ([`sensitivity`]), file formats ([`mapio`], [`manifest`]) and the CLI
//! ([`cli`]).

pub mod arch;
pub mod cli;
pub mod data;
pub mod manifest;
pub mod mapio;
pub mod nn;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use arch::{match_channels, parse_arch, preset, ArchSpec};
pub use nn::{Model, Tap};
pub use sensitivity::{
    accuracy_map, cosine_similarity, euclidean_distance, pearson, radial_profile,
    sensitivity_map, Metric, SensitivityMap,
};
pub use tensor::{Scalar, Tensor};
