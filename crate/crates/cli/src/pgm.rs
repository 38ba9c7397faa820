//! 8-bit binary greymaps (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use prompt_ttt_core::Plane;

use crate::error::{CliError, CliResult};

pub fn encode(plane: &Plane<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend_from_slice(&plane.data);
    out
}

pub fn write(path: &Path, plane: &Plane<u8>) -> CliResult<()> {
    fs::write(path, encode(plane)).map_err(|e| CliError::io(path, e))
}

/// Parses a `P5` file. Comments and any whitespace between header tokens
/// are accepted; maxval must be 255.
pub fn decode(bytes: &[u8], path: &Path) -> CliResult<Plane<u8>> {
    let bad = |m: &str| CliError::format(path, m);
    let mut pos = 0;
    let mut token = || -> CliResult<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(bad("raster shorter than header dimensions"));
    }
    if bytes.len() > start + n {
        return Err(bad("trailing bytes after raster"));
    }
    Plane::new(height, width, bytes[start..start + n].to_vec()).map_err(|e| bad(&e.to_string()))
}

pub fn read(path: &Path) -> CliResult<Plane<u8>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::format(path, "file is missing"),
        _ => CliError::io(path, e),
    })?;
    decode(&bytes, path)
}

/// Intensities in `[0, 1]` to 8-bit levels.
pub fn from_unit(plane: &Plane<f64>) -> Plane<u8> {
    Plane { height: plane.height, width: plane.width, data: plane.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect() }
}

pub fn to_unit(plane: &Plane<u8>) -> Plane<f64> {
    Plane { height: plane.height, width: plane.width, data: plane.data.iter().map(|&v| v as f64 / 255.0).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let p = Plane::new(2, 3, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode(&p);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), p);
        let mut with_comment = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(&p.data);
        assert_eq!(decode(&with_comment, Path::new("x")).unwrap(), p);
    }

    #[test]
    fn rejects_bad_files() {
        let p = Path::new("frame.pgm");
        assert!(matches!(decode(b"P2\n1 1\n255\n0", p), Err(CliError::Format { .. })));
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00", p), Err(CliError::Format { .. })));
        assert!(matches!(decode(b"P5\n1 1\n65535\n\x00\x00", p), Err(CliError::Format { .. })));
        let err = decode(b"P5\n2 2\n255\n\x00", p).unwrap_err().to_string();
        assert!(err.contains("frame.pgm"), "{err}");
    }

    #[test]
    fn unit_levels_are_exact() {
        let q = Plane::new(1, 256, (0..=255u8).collect()).unwrap();
        assert_eq!(from_unit(&to_unit(&q)), q);
    }
}
