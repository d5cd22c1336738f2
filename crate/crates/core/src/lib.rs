//! Audio-visual crowd counting: a multi-branch visual backbone with
//! attention-based branch fusion, an audio embedding network, patch
//! importance / patch count auxiliary heads, a co-attention density head,
//! and the training and evaluation harness around them.
//!
//! Everything is built on the small reverse-mode autodiff engine in
//! [`tensor`].

pub mod audio;
pub mod avt;
pub mod ccm;
pub mod error;
pub mod groundtruth;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod vfe;

pub use error::{Error, Result};
