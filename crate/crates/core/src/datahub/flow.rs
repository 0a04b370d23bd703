//! Two-channel optical-flow fields and their binary file format.
//!
//! Layout: magic `OFLW`, u32 version (1), u32 height, u32 width,
//! u32 channels (2), then channel-major row-major f32 little-endian values.

use std::fs;
use std::path::Path;

use super::DataError;

pub const FLOW_MAGIC: &[u8; 4] = b"OFLW";
pub const FLOW_VERSION: u32 = 1;
pub const FLOW_CHANNELS: usize = 2;
pub const MAX_FLOW_EXTENT: usize = 4096;

/// Dense 2 x H x W flow field; values are stored as f32, the file currency.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Channel-major row-major: `data[c * h * w + y * w + x]`.
    data: Vec<f32>,
}

impl FlowField {
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), FLOW_CHANNELS * height * width);
        FlowField {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField::from_raw(height, width, vec![0.0; FLOW_CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.height * self.width + y * self.width + x]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Values widened to f64 in the same channel-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Write a field to disk in the `OFLW` format.
pub fn write_flow(path: &Path, field: &FlowField) -> Result<(), DataError> {
    if field.height > MAX_FLOW_EXTENT || field.width > MAX_FLOW_EXTENT {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: format!("extent {}x{} exceeds limit", field.height, field.width),
        });
    }
    let mut bytes = Vec::with_capacity(20 + 4 * field.data.len());
    bytes.extend_from_slice(FLOW_MAGIC);
    bytes.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(field.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(field.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(FLOW_CHANNELS as u32).to_le_bytes());
    for v in &field.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a field back; magic, version, and payload length are all checked.
pub fn read_flow(path: &Path) -> Result<FlowField, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| DataError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 {
        return Err(bad(format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != FLOW_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != FLOW_VERSION {
        return Err(bad(format!("unsupported version {}", word(4))));
    }
    let height = word(8) as usize;
    let width = word(12) as usize;
    let channels = word(16) as usize;
    if channels != FLOW_CHANNELS {
        return Err(bad(format!("expected 2 channels, got {channels}")));
    }
    if height > MAX_FLOW_EXTENT || width > MAX_FLOW_EXTENT {
        return Err(bad(format!("extent {height}x{width} exceeds limit")));
    }
    let expected = 20 + 4 * FLOW_CHANNELS * height * width;
    if bytes.len() != expected {
        return Err(DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload is {} bytes, expected {expected}", bytes.len()),
            ),
        });
    }
    let data: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FlowField {
        height,
        width,
        data,
    })
}
