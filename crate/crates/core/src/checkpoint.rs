//! Checkpoint file: `"ICNNCKPT"` magic, u16 version, little-endian config
//! block (fields in declaration order, `maps_per_column` length-prefixed),
//! a meta block, parameter blocks in column/round/integration/final order
//! (each tensor prefixed by four u32 dims, values as f32; the bias is a
//! `(1,1,1,Q)` block), and a trailing CRC32 of all preceding bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{ConvParam, ParamSet};
use crate::net::{validate_params, IcnnConfig};
use crate::bytes::ByteReader;
use crate::tensor::BiasVec;

pub const MAGIC: &[u8; 8] = b"ICNNCKPT";
pub const VERSION: u16 = 1;

/// Run metadata carried alongside the parameters. `modulation` is the
/// background-channel `(beta, beta0)` correction set by calibration;
/// `fallback_centers` are per-part mean training medians in original image
/// coordinates, in [`crate::pipeline::PART_ORDER`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epochs_trained: u64,
    pub seed: u64,
    pub modulation: Option<(f64, f64)>,
    pub fallback_centers: Option<[(f64, f64); 6]>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta { epochs_trained: 0, seed: 0, modulation: None, fallback_centers: None }
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &IcnnConfig,
    params: &ParamSet,
    meta: &CheckpointMeta,
) -> Result<()> {
    validate_params(config, params)?;
    let bytes = encode(config, params, meta);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(IcnnConfig, ParamSet, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn encode(config: &IcnnConfig, params: &ParamSet, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    push_u32(&mut out, config.num_columns);
    push_u32(&mut out, config.num_labels);
    push_u32(&mut out, config.interlink_rounds);
    push_u32(&mut out, config.maps_per_column.len());
    for &m in &config.maps_per_column {
        push_u32(&mut out, m);
    }
    push_u32(&mut out, config.kernel_size);
    push_u32(&mut out, config.final_kernel_size);
    push_u32(&mut out, config.input_channels);

    out.extend_from_slice(&meta.epochs_trained.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    let (beta, beta0) = meta.modulation.unwrap_or((1.0, 0.0));
    out.push(meta.modulation.is_some() as u8);
    out.extend_from_slice(&beta.to_le_bytes());
    out.extend_from_slice(&beta0.to_le_bytes());
    match &meta.fallback_centers {
        None => out.push(0),
        Some(centers) => {
            out.push(centers.len() as u8);
            for (r, c) in centers {
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }

    for pair in params.pairs() {
        let (kh, kw, cin, cout) = pair.kernel.dims();
        for d in [kh, kw, cin, cout] {
            push_u32(&mut out, d);
        }
        for &v in pair.kernel.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for d in [1, 1, 1, pair.bias.len()] {
            push_u32(&mut out, d);
        }
        for &v in pair.bias.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<(IcnnConfig, ParamSet, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Format(format!("checkpoint truncated at {} bytes", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checkpoint CRC mismatch at offset {}: stored {stored:#010x}, computed {actual:#010x}",
            bytes.len() - 4
        )));
    }

    let mut r = ByteReader::new(body);
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic at offset 0".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }

    let num_columns = r.u32()? as usize;
    let num_labels = r.u32()? as usize;
    let interlink_rounds = r.u32()? as usize;
    let maps_len = r.u32()? as usize;
    if maps_len > 64 {
        return Err(Error::Format(format!(
            "implausible maps_per_column length {maps_len} at offset {}",
            r.pos - 4
        )));
    }
    let mut maps_per_column = Vec::with_capacity(maps_len);
    for _ in 0..maps_len {
        maps_per_column.push(r.u32()? as usize);
    }
    let config = IcnnConfig {
        num_columns,
        num_labels,
        interlink_rounds,
        maps_per_column,
        kernel_size: r.u32()? as usize,
        final_kernel_size: r.u32()? as usize,
        input_channels: r.u32()? as usize,
    };
    config.validate()?;

    let epochs_trained = r.u64()?;
    let seed = r.u64()?;
    let has_mod = r.u8()?;
    let beta = r.f64()?;
    let beta0 = r.f64()?;
    let modulation = match has_mod {
        0 => None,
        1 => Some((beta, beta0)),
        v => return Err(Error::Format(format!("bad modulation flag {v} at offset {}", r.pos - 17))),
    };
    let n_fallback = r.u8()?;
    let fallback_centers = match n_fallback {
        0 => None,
        6 => {
            let mut centers = [(0.0, 0.0); 6];
            for c in &mut centers {
                *c = (r.f64()?, r.f64()?);
            }
            Some(centers)
        }
        v => {
            return Err(Error::Format(format!(
                "bad fallback center count {v} at offset {}",
                r.pos - 1
            )))
        }
    };
    let meta = CheckpointMeta { epochs_trained, seed, modulation, fallback_centers };

    let mut pairs = Vec::with_capacity(config.num_slots());
    for _ in 0..config.num_slots() {
        let kernel = r.tensor4()?;
        let bias_block = r.tensor4()?;
        let (bh, bw, bc, bq) = bias_block.dims();
        if (bh, bw, bc) != (1, 1, 1) {
            return Err(Error::Format(format!(
                "bias block dims {bh}x{bw}x{bc}x{bq} are not (1,1,1,Q) near offset {}",
                r.pos
            )));
        }
        if bq != kernel.out_channels() {
            return Err(Error::Format(format!(
                "bias length {bq} does not match kernel out_channels {} near offset {}",
                kernel.out_channels(),
                r.pos
            )));
        }
        pairs.push(ConvParam { kernel, bias: BiasVec::new(bias_block.data().to_vec()) });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "trailing {} unexpected bytes at offset {}",
            body.len() - r.pos,
            r.pos
        )));
    }

    let params = ParamSet::new(pairs);
    validate_params(&config, &params)
        .map_err(|e| Error::Format(format!("checkpoint parameters inconsistent: {e}")))?;
    if !params.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok((config, params, meta))
}
