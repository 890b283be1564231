//! On-disk formats and the synthetic dataset generator.

pub mod checkpoint;
pub mod container;
pub mod pgm;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use container::{read_tensors, write_tensors, TensorFile};
pub use pgm::export_pgm;
pub use synth::{generate_record, generate_split, load_split, synth_generate, DatasetManifest, Profile, Split, SynthConfig};
