//! In-context LoRA on a miniature diffusion transformer.
//!
//! An image set is tiled into one canvas, its per-panel captions are merged into
//! one structured prompt, and a small low-rank adapter is tuned on a few dozen
//! such sets. Generation runs a rectified-flow Euler sampler with
//! classifier-free guidance; image-conditional generation masks panels of a
//! reference canvas and inpaints them.

pub mod canvas;
pub mod checkpoint;
pub mod dit;
pub mod error;
pub mod experiment;
pub mod lora;
pub mod output;
pub mod prompt;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
