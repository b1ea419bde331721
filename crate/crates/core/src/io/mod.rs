//! File formats, synthetic data and configuration text.

pub mod checkpoint;
pub mod config;
pub mod padding;
pub mod pgm;
pub mod phantom;
pub mod tensor_file;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use padding::Padding;
pub use pgm::{load_mask_pgm, load_pgm, save_mask_pgm, save_pgm};
pub use phantom::{make_phantom, PhantomSpec, Shape};
pub use tensor_file::{load_tensor, save_tensor};
