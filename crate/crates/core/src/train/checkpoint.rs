//! Raw parameter snapshots.
//!
//! Layout, little-endian:
//!
//! ```text
//! 0   8   magic "OTPECKPT"
//! 8   u16 format version (1)
//! 10  u16 reserved (0)
//! 12  u32 layer count L
//! 16  u64 minibatch index
//! 24  f64 leak, f64 threshold, f64 surrogate slope
//! 48  (L+1) × u32 widths [n_input, h_1, …, n_output]
//!     then each layer's weights as f64, row-major [n_out × n_in]
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::snn::{DenseLayer, LifParams, Network};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OTPECKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub minibatch: u64,
    pub network: Network,
}

pub fn encode_checkpoint(net: &Network, minibatch: u64) -> Vec<u8> {
    let widths = net.widths();
    let mut out = Vec::with_capacity(48 + 4 * widths.len() + 8 * net.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(net.depth() as u32).to_le_bytes());
    out.extend_from_slice(&minibatch.to_le_bytes());
    let lif = net.lif();
    for v in [lif.leak, lif.threshold, lif.slope] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for p in net.flat_params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    c.take(2, "reserved")?;
    let depth = c.u32("layer count")? as usize;
    if depth == 0 {
        return Err(Error::Format {
            offset: 12,
            message: "checkpoint has no layers".into(),
        });
    }
    let minibatch = u64::from_le_bytes(c.take(8, "minibatch")?.try_into().unwrap());
    let (leak, threshold, slope) = (c.f64("leak")?, c.f64("threshold")?, c.f64("slope")?);
    let lif = LifParams::new(leak, threshold, slope).map_err(|e| Error::Format {
        offset: 24,
        message: e.to_string(),
    })?;
    let widths = (0..=depth)
        .map(|_| c.u32("widths").map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(depth);
    for w in widths.windows(2) {
        let n = w[0].checked_mul(w[1]).ok_or_else(|| Error::Format {
            offset: c.pos as u64,
            message: "layer size overflows".into(),
        })?;
        let raw = c.take(n.saturating_mul(8), "weights")?;
        let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let weights = Array2::from_shape_vec((w[1], w[0]), values).expect("sized above");
        layers.push(DenseLayer::new(weights)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: format!("{} trailing bytes after checkpoint", bytes.len() - c.pos),
        });
    }
    Ok(Checkpoint {
        minibatch,
        network: Network::new(layers, lif)?,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &Network, minibatch: u64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(net, minibatch)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
