//! Persistence and data generation: the sectioned embedding file format,
//! the run manifest, and the deterministic synthetic benchmark.

mod format;
mod manifest;
mod synth;

pub use format::{
    find_section, read_embeddings, write_embeddings, NamedMatrix, ELEM_F64_LE, FORMAT_VERSION,
    MAGIC,
};
pub use manifest::{Manifest, ManifestPaths, PromptOverrides, ResolvedManifest};
pub use synth::{assemble_batches, synth_generate, SynthConfig, SynthOutput};

use crate::encoder::EncoderError;
use crate::losses::LossError;
use crate::numkernel::NumError;
use crate::prompt::PromptError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"CLPN\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported element type flag {0}")]
    UnsupportedElemType(u8),
    #[error("file truncated or payload length mismatch")]
    Truncated,
    #[error("trailing bytes after final section")]
    TrailingBytes,
    #[error("section name is not valid utf-8")]
    BadSectionName,
    #[error("duplicate section name {0:?}")]
    DuplicateSection(String),
    #[error("section list must be nonempty, with nonempty names")]
    EmptySections,
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("synthetic config invalid: {0}")]
    BadSynthConfig(String),
    #[error("could not draw {0} class directions with pairwise cosine <= 0.8 in 10000 attempts; dimension too small for class count")]
    RejectionOverflow(usize),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("encoder error: {0}")]
    Encoder(#[from] EncoderError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
}
