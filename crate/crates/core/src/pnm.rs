//! Binary PGM (P5) and PPM (P6) codecs, maxval 255, row-major.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path, source: io::Error) -> PnmError {
    PnmError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> PnmError {
    PnmError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Parse the three header integers after the magic, skipping whitespace and
/// `#` comments. Returns (width, height, maxval, offset of first data byte).
fn parse_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize), PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| format_err(path, "bad header integer"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster separator"));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(format_err(path, format!("unsupported maxval {}", fields[2])));
    }
    Ok((fields[0], fields[1], pos))
}

/// Read a binary PGM: returns (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, data_at) = parse_header(path, &bytes, b"P5")?;
    let need = w * h;
    let data = &bytes[data_at..];
    if data.len() < need {
        return Err(format_err(
            path,
            format!("raster too short: {} < {}", data.len(), need),
        ));
    }
    Ok((w, h, data[..need].to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), PnmError> {
    assert_eq!(pixels.len(), width * height, "pixel buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read a binary PPM: returns (width, height, interleaved RGB).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, data_at) = parse_header(path, &bytes, b"P6")?;
    let need = 3 * w * h;
    let data = &bytes[data_at..];
    if data.len() < need {
        return Err(format_err(
            path,
            format!("raster too short: {} < {}", data.len(), need),
        ));
    }
    Ok((w, h, data[..need].to_vec()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PnmError> {
    assert_eq!(rgb.len(), 3 * width * height, "pixel buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let pixels: Vec<u8> = (0..24).map(|i| (i * 10) as u8).collect();
        write_pgm(&path, 6, 4, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (6, 4));
        assert_eq!(back, pixels);
    }

    #[test]
    fn pgm_header_comments_ok() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        fs::write(&path, bytes).unwrap();
        let (w, h, data) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn pgm_rejects_truncated_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        fs::write(&path, b"P5\n4 4\n255\nabc").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let rgb: Vec<u8> = (0..27).map(|i| (i * 7) as u8).collect();
        write_ppm(&path, 3, 3, &rgb).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 3));
        assert_eq!(back, rgb);
    }
}
