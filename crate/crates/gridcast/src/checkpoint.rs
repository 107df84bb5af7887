//! Parameter checkpoint format.
//!
//! Reuses the movie header discipline: little-endian, magic `"GCP1"`,
//! version u16, a fixed config block, then the raw `f64` values of every
//! parameter tensor in declaration order (layer weights and biases in
//! order, the three bias tables, then — for the masked variant — the
//! displacement layers).
//!
//! Config block after the version:
//! kind u8 (0 = regression + biases, 1 = displacement-masked) ·
//! activation u8 · n_layers u16 · hidden u32 · history u16 · kernel u16 ·
//! channels u16 · height u32 · width u32 · hour_bins u16 · bias_combo u8
//! (bit 0 = location x hour, bit 1 = weekday x hour, bit 2 = month) ·
//! volume_channel u16.

use std::path::Path;

use gridcast_core::models::{
    init_masked, init_trb, BiasCombo, GridShape, ModelParams, TrConfig,
};
use gridcast_core::tape::Activation;
use gridcast_core::tensor::Tensor;

use crate::format::FormatError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCP1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type Result<T> = std::result::Result<T, FormatError>;

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Elu => 1,
        Activation::Selu => 2,
        Activation::LeakyRelu => 3,
    }
}

fn activation_from_code(code: u8, offset: usize) -> Result<Activation> {
    match code {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Elu),
        2 => Ok(Activation::Selu),
        3 => Ok(Activation::LeakyRelu),
        _ => Err(FormatError::InvalidField {
            what: "activation code",
            offset,
        }),
    }
}

fn combo_bits(c: BiasCombo) -> u8 {
    (c.location_hour as u8) | (c.weekday_hour as u8) << 1 | (c.month as u8) << 2
}

fn combo_from_bits(bits: u8) -> BiasCombo {
    BiasCombo {
        location_hour: bits & 1 != 0,
        weekday_hour: bits & 2 != 0,
        month: bits & 4 != 0,
    }
}

/// Serializes trained parameters.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let (kind, cfg, grid, bins, combo, volume_channel) = match params {
        ModelParams::Trb(p) => (0u8, p.config, p.grid, p.n_hour_bins, p.combo, 0u16),
        ModelParams::Masked(p) => (
            1u8,
            p.value.config,
            p.value.grid,
            p.value.n_hour_bins,
            p.value.combo,
            p.volume_channel as u16,
        ),
    };

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind);
    out.push(activation_code(cfg.activation));
    out.extend_from_slice(&(cfg.n_layers as u16).to_le_bytes());
    out.extend_from_slice(&(cfg.hidden_channels as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.history as u16).to_le_bytes());
    out.extend_from_slice(&(cfg.kernel_size as u16).to_le_bytes());
    out.extend_from_slice(&(grid.channels as u16).to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(bins as u16).to_le_bytes());
    out.push(combo_bits(combo));
    out.extend_from_slice(&volume_channel.to_le_bytes());

    for tensor in params.param_tensors() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint back into model parameters.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let need = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + n)
            .ok_or(FormatError::Truncated {
                offset,
                expected: n as u64,
                found: bytes.len().saturating_sub(offset) as u64,
            })
    };

    let magic: [u8; 4] = need(0, 4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::BadVersion {
            offset: 4,
            found: version,
        });
    }

    let kind = need(6, 1)?[0];
    let activation = activation_from_code(need(7, 1)?[0], 7)?;
    let n_layers = u16::from_le_bytes(need(8, 2)?.try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(need(10, 4)?.try_into().unwrap()) as usize;
    let history = u16::from_le_bytes(need(14, 2)?.try_into().unwrap()) as usize;
    let kernel = u16::from_le_bytes(need(16, 2)?.try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes(need(18, 2)?.try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(need(20, 4)?.try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(need(24, 4)?.try_into().unwrap()) as usize;
    let bins = u16::from_le_bytes(need(28, 2)?.try_into().unwrap()) as usize;
    let combo = combo_from_bits(need(30, 1)?[0]);
    let volume_channel = u16::from_le_bytes(need(31, 2)?.try_into().unwrap()) as usize;
    let mut offset = 33;

    let config = TrConfig {
        n_layers,
        hidden_channels: hidden,
        history,
        activation,
        kernel_size: kernel,
    };
    let grid = GridShape {
        height,
        width,
        channels,
    };

    // Build zero-structured parameters to know every tensor shape, then
    // overwrite the values from the payload.
    let mut params = match kind {
        0 => ModelParams::Trb(init_trb(config, grid, bins, combo, 0)?),
        1 => {
            let mut p = init_masked(config, grid, bins, combo, 0)?;
            p.volume_channel = volume_channel;
            ModelParams::Masked(p)
        }
        _ => {
            return Err(FormatError::InvalidField {
                what: "model kind",
                offset: 6,
            })
        }
    };

    for tensor in params.param_tensors_mut() {
        let n = tensor.len() * 8;
        let chunk = need(offset, n)?;
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *tensor = Tensor::new(tensor.shape().to_vec(), values).map_err(FormatError::Core)?;
        offset += n;
    }
    if offset != bytes.len() {
        return Err(FormatError::Truncated {
            offset,
            expected: 0,
            found: (bytes.len() - offset) as u64,
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| FormatError::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::Io {
        context: format!("reading {}", path.display()),
        source: e,
    })?;
    decode_checkpoint(&bytes)
}
