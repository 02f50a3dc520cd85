//! Binary PGM (P5) input and output for 2D scalar images. Intensities map
//! to [0,1] on read; 16-bit samples are big-endian per the format.

use std::path::Path;

use varreg_core::grid::{GridDesc, ScalarField};

use crate::error::{CliError, Result};

/// Reads a P5 image with maxval 255 or 65535, scaled to [0,1].
/// Grid axis 0 is the image row (height), axis 1 the column (width).
pub fn read_pgm(path: &Path) -> Result<ScalarField> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_pgm(&bytes, path)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<ScalarField> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(CliError::data(path, "not a binary PGM (P5) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for f in &mut fields {
        *f = next_token(bytes, &mut pos, path)?;
    }
    // exactly one whitespace byte separates the header from the samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CliError::data(path, "malformed PGM header"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(CliError::data(path, "degenerate PGM dimensions"));
    }
    let (bpp, scale) = match maxval {
        255 => (1usize, 255.0),
        65535 => (2usize, 65535.0),
        m => return Err(CliError::data(path, format!("unsupported maxval {m}"))),
    };
    let n = width
        .checked_mul(height)
        .and_then(|x| x.checked_mul(bpp))
        .ok_or_else(|| CliError::data(path, "dimension overflow"))?;
    if bytes.len() - pos != n {
        return Err(CliError::data(path, "truncated or oversized PGM payload"));
    }
    let mut values = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let v = if bpp == 1 {
            bytes[pos + i] as f64
        } else {
            u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
        };
        values.push(v / scale);
    }
    let grid = GridDesc::isotropic(&[height, width])?;
    Ok(ScalarField::new(grid, values)?)
}

/// One whitespace-delimited integer, skipping `#` comment lines.
fn next_token(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CliError::data(path, "malformed PGM header"))
}

/// Writes a P5 image; values are clamped to [0,1] and quantized.
pub fn write_pgm(path: &Path, f: &ScalarField, maxval: u32) -> Result<()> {
    if f.grid().rank() != 2 {
        return Err(CliError::Usage("PGM output requires a 2D field".into()));
    }
    if f.values().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(format!(
            "non-finite value while writing {}",
            path.display()
        )));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(CliError::Usage("PGM maxval must be 255 or 65535".into()));
    }
    let [h, w] = [f.grid().dims()[0], f.grid().dims()[1]];
    let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in f.values() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if maxval == 255 {
            bytes.push(q as u8);
        } else {
            bytes.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    crate::atomic_write(path, &bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use varreg_core::rng::SeededRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        std::mem::forget(dir);
        p
    }

    #[test]
    fn eight_bit_round_trip_within_half_step() {
        let g = GridDesc::isotropic(&[6, 9]).unwrap();
        let mut rng = SeededRng::new(4);
        let f = ScalarField::from_fn(g, |_| rng.unit());
        let p = tmp("a.pgm");
        write_pgm(&p, &f, 255).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.grid().dims(), f.grid().dims());
        for (a, b) in back.values().iter().zip(f.values()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let p = tmp("c.pgm");
        let mut bytes = b"P5\n# a comment\n3 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
        std::fs::write(&p, &bytes).unwrap();
        let f = read_pgm(&p).unwrap();
        assert_eq!(f.grid().dims(), &[2, 3]);
        assert_eq!(f.values()[2], 1.0);
    }

    #[test]
    fn sixteen_bit_samples_are_big_endian() {
        let p = tmp("w.pgm");
        let mut bytes = b"P5\n2 2\n65535\n".to_vec();
        // 0x0100 = 256, 0xffff = 65535
        bytes.extend_from_slice(&[0x01, 0x00, 0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        std::fs::write(&p, &bytes).unwrap();
        let f = read_pgm(&p).unwrap();
        assert!((f.values()[0] - 256.0 / 65535.0).abs() < 1e-12);
        assert_eq!(f.values()[1], 1.0);
        assert_eq!(f.values()[2], 0.0);
        assert!((f.values()[3] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let g = GridDesc::isotropic(&[4, 5]).unwrap();
        let mut rng = SeededRng::new(8);
        let f = ScalarField::from_fn(g, |_| rng.unit());
        let p = tmp("hi.pgm");
        write_pgm(&p, &f, 65535).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in back.values().iter().zip(f.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn bad_maxval_is_rejected() {
        let p = tmp("bad.pgm");
        std::fs::write(&p, b"P5\n2 2\n1023\n\0\0\0\0").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
