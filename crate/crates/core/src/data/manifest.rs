//! Line-oriented dataset manifest. One clip per line, whitespace-separated,
//! in this order:
//!
//! ```text
//! clip_id seed t h w blobs deform darkness texture_scale decoys noise
//! ```
//!
//! `#` starts a comment; blank lines are ignored.

use std::collections::HashSet;
use std::str::FromStr;

use super::{DataError, Result, SynthSpec};

pub const FIELDS: [&str; 11] = [
    "clip_id",
    "seed",
    "t",
    "h",
    "w",
    "blobs",
    "deform",
    "darkness",
    "texture_scale",
    "decoys",
    "noise",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub spec: SynthSpec,
}

fn field<T: FromStr>(tok: &str, name: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.parse().map_err(|e| DataError::Manifest {
        line,
        msg: format!("field {name} = {tok:?}: {e}"),
    })
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != FIELDS.len() {
            return Err(DataError::Manifest {
                line,
                msg: format!(
                    "expected {} fields ({}), found {}",
                    FIELDS.len(),
                    FIELDS.join(" "),
                    toks.len()
                ),
            });
        }
        let id = toks[0];
        if !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(DataError::Manifest {
                line,
                msg: format!("clip id {id:?} may only use [A-Za-z0-9_-]"),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(DataError::Manifest {
                line,
                msg: format!("duplicate clip id {id:?}"),
            });
        }
        let spec = SynthSpec {
            seed: field(toks[1], FIELDS[1], line)?,
            t: field(toks[2], FIELDS[2], line)?,
            h: field(toks[3], FIELDS[3], line)?,
            w: field(toks[4], FIELDS[4], line)?,
            blobs: field(toks[5], FIELDS[5], line)?,
            deform: field(toks[6], FIELDS[6], line)?,
            darkness: field(toks[7], FIELDS[7], line)?,
            texture_scale: field(toks[8], FIELDS[8], line)?,
            decoys: field(toks[9], FIELDS[9], line)?,
            noise: field(toks[10], FIELDS[10], line)?,
        };
        spec.validate().map_err(|e| DataError::Manifest {
            line,
            msg: e.to_string(),
        })?;
        out.push(ManifestEntry {
            clip_id: id.to_string(),
            spec,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = format!("# {}\n", FIELDS.join(" "));
    for e in entries {
        let p = &e.spec;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {}\n",
            e.clip_id,
            p.seed,
            p.t,
            p.h,
            p.w,
            p.blobs,
            p.deform,
            p.darkness,
            p.texture_scale,
            p.decoys,
            p.noise
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let entries: Vec<ManifestEntry> = (0..3)
            .map(|i| ManifestEntry {
                clip_id: format!("clip_{i}"),
                spec: SynthSpec {
                    deform: 0.1 * i as f64 + 0.05,
                    ..SynthSpec::desk(i)
                },
            })
            .collect();
        assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\n a 1 2 8 8 1 0.5 0.5 4 0 0  # trailing\n";
        let e = parse_manifest(text).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].spec.h, 8);
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "# ok\na 1 2 8 8 1 0.5 0.5 4 0 0\nb 1 2 8 8 1 zero 0.5 4 0 0\n";
        match parse_manifest(text).unwrap_err() {
            DataError::Manifest { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("deform"));
            }
            e => panic!("unexpected {e}"),
        }
        let err = parse_manifest("a 1 2 3\n").unwrap_err().to_string();
        assert!(err.starts_with("manifest line 1:"), "{err}");
        assert!(parse_manifest("a 1 2 8 8 1 0.5 0.5 4 0 0\na 2 2 8 8 1 0.5 0.5 4 0 0").is_err());
        assert!(parse_manifest("../x 1 2 8 8 1 0.5 0.5 4 0 0").is_err());
        assert!(parse_manifest("a 1 2 8 8 1 0.5 1.5 4 0 0").is_err());
    }
}
