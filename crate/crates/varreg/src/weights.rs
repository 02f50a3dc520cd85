//! The weights checkpoint: named f32 tensors behind an ASCII manifest,
//! guarded by a trailing FNV-1a checksum of the payload bytes. On top of
//! the generic container sit save/load for the unrolled network's
//! parameters.

use std::path::Path;

use varreg_core::conv::{ConvLayer, ConvNet};
use varreg_core::unroll::{CascadeParams, Sharing};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 7] = b"VRWGHT1";

/// One named tensor: shape and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self { name: name.into(), shape, values }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn write_weights(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    for t in tensors {
        if t.name.contains(char::is_whitespace) || t.name.is_empty() {
            return Err(CliError::Usage(format!("invalid tensor name {:?}", t.name)));
        }
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(CliError::Usage(format!(
                "tensor {} shape does not match value count",
                t.name
            )));
        }
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("tensor {} {}\n", t.name, dims.join(" ")).as_bytes());
    }
    out.extend_from_slice(b"end\n");
    let mut payload = Vec::new();
    for t in tensors {
        for &v in &t.values {
            if !v.is_finite() {
                return Err(CliError::Numerical(format!(
                    "non-finite value in tensor {} while writing {}",
                    t.name,
                    path.display()
                )));
            }
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&sum.to_le_bytes());
    crate::atomic_write(path, &out).map_err(|e| CliError::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 8 || &bytes[..7] != MAGIC || bytes[7] != b'\n' {
        return Err(CliError::data(path, "bad magic (not a weights file)"));
    }
    let mut pos = 8;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let eol = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CliError::data(path, "unterminated manifest"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + eol])
            .map_err(|_| CliError::data(path, "non-ASCII manifest"))?;
        pos += eol + 1;
        if line == "end" {
            break;
        }
        let mut it = line.split_whitespace();
        if it.next() != Some("tensor") {
            return Err(CliError::data(path, format!("unknown manifest line: {line}")));
        }
        let name = it
            .next()
            .ok_or_else(|| CliError::data(path, "tensor line missing name"))?
            .to_string();
        let shape = it
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CliError::data(path, "bad tensor shape"))?;
        manifest.push((name, shape));
    }
    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let want = total * 4 + 8;
    if bytes.len() - pos != want {
        return Err(CliError::data(
            path,
            format!("payload is {} bytes, expected {want}", bytes.len() - pos),
        ));
    }
    let payload = &bytes[pos..pos + total * 4];
    let stored = u64::from_le_bytes(bytes[pos + total * 4..].try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(CliError::data(path, "checksum mismatch"));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    let mut off = 0;
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let o = (off + i) * 4;
            values.push(f32::from_le_bytes(payload[o..o + 4].try_into().unwrap()));
        }
        off += n;
        tensors.push(Tensor { name, shape, values });
    }
    Ok(tensors)
}

fn net_tensors(prefix: &str, net: &ConvNet, out: &mut Vec<Tensor>) {
    for (j, l) in net.layers.iter().enumerate() {
        out.push(Tensor::new(
            format!("{prefix}.layer{j}.weights"),
            vec![l.out_ch, l.in_ch, l.taps()],
            l.weights.iter().map(|&v| v as f32).collect(),
        ));
        out.push(Tensor::new(
            format!("{prefix}.layer{j}.bias"),
            vec![l.out_ch],
            l.bias.iter().map(|&v| v as f32).collect(),
        ));
    }
}

fn rank_from_taps(taps: usize, path: &Path) -> Result<usize> {
    match taps {
        9 => Ok(2),
        27 => Ok(3),
        t => Err(CliError::data(path, format!("kernel tap count {t} is not 3^rank"))),
    }
}

/// Rebuilds a conv net from consecutive `prefix.layer<j>.*` tensors.
fn net_from_tensors(prefix: &str, tensors: &[Tensor], path: &Path) -> Result<ConvNet> {
    let mut layers = Vec::new();
    for j in 0.. {
        let wname = format!("{prefix}.layer{j}.weights");
        let bname = format!("{prefix}.layer{j}.bias");
        let Some(w) = tensors.iter().find(|t| t.name == wname) else { break };
        let b = tensors
            .iter()
            .find(|t| t.name == bname)
            .ok_or_else(|| CliError::data(path, format!("missing tensor {bname}")))?;
        if w.shape.len() != 3 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
            return Err(CliError::data(path, format!("bad shapes for {prefix}.layer{j}")));
        }
        layers.push(ConvLayer {
            rank: rank_from_taps(w.shape[2], path)?,
            in_ch: w.shape[1],
            out_ch: w.shape[0],
            weights: w.values.iter().map(|&v| v as f64).collect(),
            bias: b.values.iter().map(|&v| v as f64).collect(),
        });
    }
    if layers.is_empty() {
        return Err(CliError::data(path, format!("no {prefix}.layer* tensors")));
    }
    let net = ConvNet { layers };
    net.validate()?;
    Ok(net)
}

/// Saves the unrolled network's parameters as a checkpoint. The cascade
/// layout rides along so the file is self-describing.
pub fn save_params(
    path: &Path,
    params: &CascadeParams,
    n_warp: usize,
    n_iter: usize,
) -> Result<()> {
    let mut tensors = vec![
        Tensor::new(
            "layout",
            vec![3],
            vec![
                match params.sharing {
                    Sharing::Theta1 => 1.0,
                    Sharing::Theta2 => 2.0,
                },
                n_warp as f32,
                n_iter as f32,
            ],
        ),
        Tensor::new(
            "raw_thetas",
            vec![params.raw_thetas.len()],
            params.raw_thetas.iter().map(|&v| v as f32).collect(),
        ),
    ];
    for (i, d) in params.denoisers.iter().enumerate() {
        net_tensors(&format!("denoiser{i}"), d, &mut tensors);
    }
    net_tensors("init", &params.init_net, &mut tensors);
    write_weights(path, &tensors)
}

/// Loads a checkpoint saved by [`save_params`]; returns the parameters
/// with their recorded (n_warp, n_iter).
pub fn load_params(path: &Path) -> Result<(CascadeParams, usize, usize)> {
    let tensors = read_weights(path)?;
    let layout = tensors
        .iter()
        .find(|t| t.name == "layout")
        .ok_or_else(|| CliError::data(path, "missing layout tensor"))?;
    if layout.values.len() != 3 {
        return Err(CliError::data(path, "layout tensor must have 3 entries"));
    }
    let sharing = match layout.values[0] as i64 {
        1 => Sharing::Theta1,
        2 => Sharing::Theta2,
        _ => return Err(CliError::data(path, "unknown sharing code")),
    };
    let (n_warp, n_iter) = (layout.values[1] as usize, layout.values[2] as usize);
    let thetas = tensors
        .iter()
        .find(|t| t.name == "raw_thetas")
        .ok_or_else(|| CliError::data(path, "missing raw_thetas tensor"))?;
    let slots = match sharing {
        Sharing::Theta1 => 1,
        Sharing::Theta2 => n_warp * n_iter,
    };
    if thetas.values.len() != slots {
        return Err(CliError::data(path, "raw_thetas length does not match layout"));
    }
    let mut denoisers = Vec::with_capacity(slots);
    for i in 0..slots {
        denoisers.push(net_from_tensors(&format!("denoiser{i}"), &tensors, path)?);
    }
    let init_net = net_from_tensors("init", &tensors, path)?;
    let params = CascadeParams {
        sharing,
        raw_thetas: thetas.values.iter().map(|&v| v as f64).collect(),
        denoisers,
        init_net,
    };
    let rank = init_net_rank(&params.init_net);
    params.validate(rank, n_warp, n_iter)?;
    Ok((params, n_warp, n_iter))
}

fn init_net_rank(net: &ConvNet) -> usize {
    net.out_channels()
}
