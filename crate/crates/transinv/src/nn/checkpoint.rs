//! Checkpoint container: magic "TINV", a u16 format version, the
//! length-prefixed architecture JSON, parameter tensors as little-endian
//! f32 in canonical order, and a trailing CRC32 over everything after the
//! 6-byte header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ConvLayer, DenseLayer, Model, NnError};
use crate::arch::{pad_pair, ArchSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TINV";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("embedded architecture is invalid: {0}")]
    Arch(#[from] crate::arch::ArchError),
    #[error("architecture/parameter mismatch: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn expected_param_shapes(arch: &ArchSpec) -> Vec<Vec<usize>> {
    let mut shapes = Vec::with_capacity(10);
    let mut in_c = arch.input[0];
    for b in &arch.conv_blocks {
        shapes.push(vec![b.channels, in_c, b.kernel, b.kernel]);
        shapes.push(vec![b.channels]);
        in_c = b.channels;
    }
    let flat = arch.conv_output_dim().expect("validated arch");
    shapes.push(vec![arch.hidden_units, flat]);
    shapes.push(vec![arch.hidden_units]);
    shapes.push(vec![arch.output_units, arch.hidden_units]);
    shapes.push(vec![arch.output_units]);
    shapes
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut payload = Vec::new();
    let json = serde_json::to_vec(&model.arch).expect("ArchSpec serializes");
    payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&payload)?;
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 6 {
        return Err(CheckpointError::Truncated("header"));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated("checksum"));
    }
    let payload = &bytes[6..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    if payload.len() < 4 {
        return Err(CheckpointError::Truncated("arch length"));
    }
    let json_len = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
    if payload.len() < 4 + json_len {
        return Err(CheckpointError::Truncated("arch json"));
    }
    let json = &payload[4..4 + json_len];
    let arch = crate::arch::parse_arch(
        std::str::from_utf8(json)
            .map_err(|_| CheckpointError::ArchMismatch("arch json is not UTF-8".into()))?,
    )?;

    let shapes = expected_param_shapes(&arch);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let body = &payload[4 + json_len..];
    if body.len() != total * 4 {
        return Err(CheckpointError::ArchMismatch(format!(
            "architecture `{}` implies {} parameter bytes, found {}",
            arch.name,
            total * 4,
            body.len()
        )));
    }

    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let at = offset + i * 4;
            data.push(f32::from_le_bytes(body[at..at + 4].try_into().unwrap()));
        }
        offset += len * 4;
        tensors.push(Tensor::from_vec(shape, data).expect("shape matches data"));
    }

    let mut it = tensors.into_iter();
    let mut conv = Vec::with_capacity(3);
    for b in &arch.conv_blocks {
        let kernels = it.next().unwrap();
        let bias = it.next().unwrap();
        let (lo, hi) = pad_pair(b.kernel, b.padding);
        conv.push(ConvLayer::with_pads(kernels, bias, b.stride, lo, hi)?);
    }
    let fc1 = DenseLayer::new(it.next().unwrap(), it.next().unwrap())?;
    let fc2 = DenseLayer::new(it.next().unwrap(), it.next().unwrap())?;
    Ok(Model::from_parts(arch, conv, fc1, fc2))
}
