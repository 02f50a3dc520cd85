//! The binary field container: an eight-byte magic, a short ASCII header,
//! and a planar little-endian f32 payload. One format covers scalar
//! images, label masks, and displacement fields.

use std::path::Path;

use varreg_core::grid::{GridDesc, ScalarField, VectorField};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"VRFIELD1";

/// A field read back from disk; channel count decides the variant.
#[derive(Debug, Clone)]
pub enum FieldData {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl FieldData {
    pub fn grid(&self) -> &GridDesc {
        match self {
            FieldData::Scalar(f) => f.grid(),
            FieldData::Vector(f) => f.grid(),
        }
    }

    pub fn into_scalar(self, path: &Path) -> Result<ScalarField> {
        match self {
            FieldData::Scalar(f) => Ok(f),
            FieldData::Vector(_) => {
                Err(CliError::data(path, "expected a single-channel field"))
            }
        }
    }

    pub fn into_vector(self, path: &Path) -> Result<VectorField> {
        match self {
            FieldData::Vector(f) => Ok(f),
            FieldData::Scalar(_) => {
                Err(CliError::data(path, "expected a rank-channel displacement field"))
            }
        }
    }
}

fn header_bytes(grid: &GridDesc, channels: usize) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.push(b'\n');
    let join = |xs: Vec<String>| xs.join(" ");
    h.extend_from_slice(format!("rank {}\n", grid.rank()).as_bytes());
    h.extend_from_slice(
        format!("dims {}\n", join(grid.dims().iter().map(|d| d.to_string()).collect()))
            .as_bytes(),
    );
    h.extend_from_slice(
        format!(
            "spacing {}\n",
            join(grid.spacing().iter().map(|s| s.to_string()).collect())
        )
        .as_bytes(),
    );
    h.extend_from_slice(format!("channels {channels}\n").as_bytes());
    h.extend_from_slice(b"dtype f32\nend\n");
    h
}

fn encode(grid: &GridDesc, planes: &[&[f64]], path: &Path) -> Result<Vec<u8>> {
    for p in planes {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!(
                "non-finite value while writing {}",
                path.display()
            )));
        }
    }
    let mut bytes = header_bytes(grid, planes.len());
    for p in planes {
        for &v in *p {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn write_scalar_field(path: &Path, f: &ScalarField) -> Result<()> {
    let bytes = encode(f.grid(), &[f.values()], path)?;
    crate::atomic_write(path, &bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_vector_field(path: &Path, u: &VectorField) -> Result<()> {
    let planes: Vec<&[f64]> = (0..u.rank()).map(|c| u.component(c)).collect();
    let bytes = encode(u.grid(), &planes, path)?;
    crate::atomic_write(path, &bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_field(path: &Path) -> Result<FieldData> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_field(&bytes, path)
}

fn parse_field(bytes: &[u8], path: &Path) -> Result<FieldData> {
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(CliError::data(path, "bad magic (not a field file)"));
    }
    let mut pos = 8;
    if bytes[pos] != b'\n' {
        return Err(CliError::data(path, "malformed header"));
    }
    pos += 1;
    let mut rank = 0usize;
    let mut dims: Vec<usize> = Vec::new();
    let mut spacing: Vec<f64> = Vec::new();
    let mut channels = 0usize;
    let mut dtype_seen = false;
    loop {
        let eol = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CliError::data(path, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + eol])
            .map_err(|_| CliError::data(path, "non-ASCII header"))?;
        pos += eol + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("end") => break,
            Some("rank") => {
                rank = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .filter(|&r| r == 2 || r == 3)
                    .ok_or_else(|| CliError::data(path, "rank must be 2 or 3"))?;
            }
            Some("dims") => {
                dims = it
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| CliError::data(path, "bad dims line"))?;
            }
            Some("spacing") => {
                spacing = it
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| CliError::data(path, "bad spacing line"))?;
            }
            Some("channels") => {
                channels = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| CliError::data(path, "bad channels line"))?;
            }
            Some("dtype") => {
                if it.next() != Some("f32") {
                    return Err(CliError::data(path, "unsupported dtype"));
                }
                dtype_seen = true;
            }
            _ => return Err(CliError::data(path, format!("unknown header line: {line}"))),
        }
    }
    if !dtype_seen || dims.len() != rank || spacing.len() != rank {
        return Err(CliError::data(path, "incomplete or inconsistent header"));
    }
    let grid = GridDesc::new(&dims, &spacing)?;
    let n = grid.len();
    let want = n
        .checked_mul(channels)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| CliError::data(path, "dimension overflow"))?;
    if bytes.len() - pos != want {
        return Err(CliError::data(
            path,
            format!("payload is {} bytes, expected {want}", bytes.len() - pos),
        ));
    }
    let mut planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut plane = Vec::with_capacity(n);
        for i in 0..n {
            let o = pos + (c * n + i) * 4;
            plane.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
        }
        planes.push(plane);
    }
    if channels == 1 {
        Ok(FieldData::Scalar(ScalarField::new(grid, planes.pop().unwrap())?))
    } else if channels == rank {
        Ok(FieldData::Vector(VectorField::new(grid, planes)?))
    } else {
        Err(CliError::data(path, format!("unsupported channel count {channels}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use varreg_core::rng::SeededRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // keep the dir alive by leaking it; tests are short-lived
        let p = dir.path().join(name);
        std::mem::forget(dir);
        p
    }

    #[test]
    fn scalar_round_trip_is_f32_exact() {
        let g = GridDesc::new(&[5, 7], &[1.5, 2.0]).unwrap();
        let mut rng = SeededRng::new(1);
        let f = ScalarField::from_fn(g, |_| rng.uniform(-3.0, 3.0));
        let p = tmp("a.vrf");
        write_scalar_field(&p, &f).unwrap();
        let back = read_field(&p).unwrap().into_scalar(&p).unwrap();
        assert_eq!(back.grid(), f.grid());
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn vector_round_trip_preserves_components() {
        let g = GridDesc::isotropic(&[4, 3, 5]).unwrap();
        let mut rng = SeededRng::new(2);
        let mut u = VectorField::zeros(g);
        for c in 0..3 {
            for v in u.component_mut(c) {
                *v = rng.normal();
            }
        }
        let p = tmp("u.vrf");
        write_vector_field(&p, &u).unwrap();
        let back = read_field(&p).unwrap().into_vector(&p).unwrap();
        for c in 0..3 {
            for (a, b) in back.component(c).iter().zip(u.component(c)) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let g = GridDesc::isotropic(&[4, 3]).unwrap();
        let f = ScalarField::zeros(g.clone());
        let p = tmp("size.vrf");
        write_scalar_field(&p, &f).unwrap();
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, header_bytes(&g, 1).len() + 48);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let g = GridDesc::isotropic(&[4, 4]).unwrap();
        let p = tmp("bad.vrf");
        write_scalar_field(&p, &ScalarField::zeros(g)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_field(&p).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let g = GridDesc::isotropic(&[4, 4]).unwrap();
        let p = tmp("trunc.vrf");
        write_scalar_field(&p, &ScalarField::zeros(g)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_field(&p).is_err());
    }

    #[test]
    fn non_finite_values_refuse_to_write() {
        let g = GridDesc::isotropic(&[4, 4]).unwrap();
        let mut f = ScalarField::zeros(g);
        f.values_mut()[3] = f64::NAN;
        let p = tmp("nan.vrf");
        let err = write_scalar_field(&p, &f).unwrap_err();
        assert_eq!(err.exit_code(), crate::ExitCode::Numerical);
        assert!(!p.exists());
    }
}
