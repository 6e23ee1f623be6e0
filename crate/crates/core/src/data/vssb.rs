//! VSSB container: `"VSSB"`, u32 version, u32 t, h, w (all little-endian),
//! then `t*h*w` f32 frames in `[0, 1]`, then `t*h*w` u8 masks in `{0, 1}`.

use std::fs;
use std::path::Path;

use super::{DataError, Result, ShadowClip};
use crate::tensor::Tensor;

pub const VSSB_MAGIC: [u8; 4] = *b"VSSB";
pub const VSSB_VERSION: u32 = 1;
const HEADER: usize = 20;

pub fn encode_clip(clip: &ShadowClip) -> Vec<u8> {
    let (t, h, w) = clip.dims();
    let n = t * h * w;
    let mut out = Vec::with_capacity(HEADER + 5 * n);
    out.extend_from_slice(&VSSB_MAGIC);
    for v in [VSSB_VERSION, t as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in clip.frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(clip.masks.data().iter().map(|&m| m as u8));
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_clip(bytes: &[u8], clip_id: &str) -> Result<ShadowClip> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != VSSB_MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER {
        return Err(DataError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VSSB_VERSION {
        return Err(DataError::Version {
            found: version,
            expected: VSSB_VERSION,
        });
    }
    let (t, h, w) = (
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    );
    if t == 0 || h == 0 || w == 0 {
        return Err(DataError::Format(format!("empty clip dims {t}x{h}x{w}")));
    }
    let n = t * h * w;
    let expected = HEADER + 5 * n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let frames: Vec<f64> = bytes[HEADER..HEADER + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut masks = Vec::with_capacity(n);
    for (index, &b) in bytes[HEADER + 4 * n..].iter().enumerate() {
        if b > 1 {
            return Err(DataError::NonBinaryMask {
                index,
                value: b as f64,
            });
        }
        masks.push(b as f64);
    }
    let shape = [t, h, w];
    ShadowClip::new(
        Tensor::new(shape, frames).expect("sized"),
        Tensor::new(shape, masks).expect("sized"),
        clip_id,
    )
}

pub fn write_clip(clip: &ShadowClip, path: &Path) -> Result<()> {
    fs::write(path, encode_clip(clip)).map_err(|e| DataError::io(path, e))
}

/// Reads a clip; its id is the file stem.
pub fn read_clip(path: &Path) -> Result<ShadowClip> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_clip(&bytes, &id)
}

/// Every `*.vssb` in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<ShadowClip>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vssb"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_clip(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, SynthSpec};
    use proptest::prelude::*;

    fn clip(seed: u64) -> ShadowClip {
        let spec = SynthSpec {
            t: 2,
            h: 8,
            w: 12,
            ..SynthSpec::desk(seed)
        };
        generate_clip(&spec, "c").unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_clip(&clip(1));
        assert_eq!(&b[..4], b"VSSB");
        assert_eq!(u32_at(&b, 4), 1);
        assert_eq!((u32_at(&b, 8), u32_at(&b, 12), u32_at(&b, 16)), (2, 8, 12));
        assert_eq!(b.len(), 20 + 5 * 2 * 8 * 12);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = clip(2);
        let p = dir.path().join("c.vssb");
        write_clip(&c, &p).unwrap();
        assert_eq!(read_clip(&p).unwrap(), c);
        assert_eq!(load_dir(dir.path()).unwrap(), vec![c]);
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode_clip(&clip(3));
        b[0] = b'X';
        assert!(matches!(
            decode_clip(&b, "c"),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut b = encode_clip(&clip(3));
        b[4] = 2;
        assert!(matches!(
            decode_clip(&b, "c"),
            Err(DataError::Version {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_names_lengths() {
        let b = encode_clip(&clip(4));
        let err = decode_clip(&b[..b.len() - 1], "c").unwrap_err();
        match err {
            DataError::Truncated { expected, actual } => {
                assert_eq!((expected, actual), (b.len(), b.len() - 1))
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err_text(&b[..b.len() - 1]).contains(&format!(
            "expected {} bytes, got {}",
            b.len(),
            b.len() - 1
        )));
        assert!(matches!(
            decode_clip(&b[..10], "c"),
            Err(DataError::Truncated { .. })
        ));
    }

    fn err_text(b: &[u8]) -> String {
        decode_clip(b, "c").unwrap_err().to_string()
    }

    #[test]
    fn non_binary_mask_rejected() {
        let mut b = encode_clip(&clip(5));
        let last = b.len() - 1;
        b[last] = 7;
        assert!(matches!(
            decode_clip(&b, "c"),
            Err(DataError::NonBinaryMask { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_clip(Path::new("/nonexistent/x.vssb")),
            Err(DataError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn random_clips_round_trip(seed in any::<u64>()) {
            let c = clip(seed);
            prop_assert_eq!(decode_clip(&encode_clip(&c), "c").unwrap(), c);
        }
    }
}
