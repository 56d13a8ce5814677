//! Dataset readers and writers, config files and synthetic sequences.

pub mod kv;
pub mod synth;
pub mod tum;

pub use kv::KeyValues;
pub use synth::{Facing, generate_synthetic, render, write_synthetic, Aabb, SyntheticSceneSpec, SyntheticSequence};
pub use tum::{read_tum_sequence, write_tum_sequence, Sequence};
