//! Moving-sprite sequences: generation, sprite ingestion, the SEQ0 container
//! and batch assembly.

mod batch;
mod generate;
mod io;
mod sprites;

pub use batch::{make_batches, Batch, BatchSpec, Batches};
pub use generate::{reflect_step, trajectory, Generator, GeneratorConfig, SpriteSource};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use sprites::{builtin_shapes, load_sprites_idx, parse_idx, Sprite};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

/// One video: `frames` consecutive H×W×C frames of 8-bit intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    /// `(seed, index)` for generated sequences; unknown when read from disk.
    pub provenance: Option<(u64, u64)>,
}

impl SequenceRecord {
    pub fn frame_len(&self) -> usize {
        self.data.len() / self.frames.max(1)
    }

    pub fn channels(&self) -> usize {
        self.frame_len() / (self.height * self.width).max(1)
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }
}
