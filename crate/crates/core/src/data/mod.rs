//! Synthetic shadow clips, the VSSB container, manifests and PGM export.

mod manifest;
mod pgm;
mod synth;
mod vssb;

use std::io;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub use manifest::{format_manifest, parse_manifest, ManifestEntry};
pub use pgm::{export_pgm, import_pgm_dir, quantize, read_pgm, write_pgm, PgmScale};
pub use synth::{generate_clip, generate_layers, SynthSpec};
pub use vssb::{
    decode_clip, encode_clip, load_dir, read_clip, write_clip, VSSB_MAGIC, VSSB_VERSION,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"VSSB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("frame value {value} at index {index} is outside [0, 1]")]
    FrameRange { index: usize, value: f64 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid clip spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Format(String),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Grayscale frames in `[0, 1]` and binary masks, both `[t, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowClip {
    pub frames: Tensor,
    pub masks: Tensor,
    pub clip_id: String,
}

impl ShadowClip {
    pub fn new(frames: Tensor, masks: Tensor, clip_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 3 || frames.shape() != masks.shape() {
            return Err(DataError::Format(format!(
                "frames {:?} and masks {:?} must share a [t, h, w] shape",
                frames.shape(),
                masks.shape()
            )));
        }
        if let Some((index, &value)) = masks
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(DataError::NonBinaryMask { index, value });
        }
        if let Some((index, &value)) = frames
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v))
        {
            return Err(DataError::FrameRange { index, value });
        }
        Ok(ShadowClip {
            frames,
            masks,
            clip_id: clip_id.into(),
        })
    }

    /// `(t, h, w)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }

    /// Mirrors every frame and mask left to right.
    pub fn flipped(&self) -> ShadowClip {
        let (t, h, w) = self.dims();
        let flip = |x: &Tensor| {
            Tensor::from_fn([t, h, w], |i| {
                let (row, col) = (i / w, i % w);
                x.data()[row * w + (w - 1 - col)]
            })
        };
        ShadowClip {
            frames: flip(&self.frames),
            masks: flip(&self.masks),
            clip_id: self.clip_id.clone(),
        }
    }
}

/// Generator for `seed` on sub-stream `stream`. Clips draw from disjoint
/// streams of the same seed so adding a component never shifts another's
/// random numbers.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
