//! On-disk spike raster format.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "SPKRASTR"
//!      8     2  version (u16, currently 1)
//!     10     1  encoding tag (0 unspecified, 1 time randman, 2 rate randman, 3 shd)
//!     11     1  reserved, zero
//!     12     4  time-steps T (u32)
//!     16     4  channels C (u32)
//!     20     4  number of examples (u32)
//!     24     4  number of classes (u32)
//!     28        examples, each:
//!                 4 bytes  label (u32)
//!                 ceil(T·C/8) bytes  spikes, row-major [T × C], bit k of the
//!                 row-major index at byte k/8, bit k%8 (LSB first)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::SpikeRaster;

pub const MAGIC: &[u8; 8] = b"SPKRASTR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingTag {
    #[default]
    Unspecified,
    TimeRandman,
    RateRandman,
    Shd,
}

impl EncodingTag {
    fn to_byte(self) -> u8 {
        match self {
            EncodingTag::Unspecified => 0,
            EncodingTag::TimeRandman => 1,
            EncodingTag::RateRandman => 2,
            EncodingTag::Shd => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => EncodingTag::Unspecified,
            1 => EncodingTag::TimeRandman,
            2 => EncodingTag::RateRandman,
            3 => EncodingTag::Shd,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterHeader {
    pub version: u16,
    pub encoding: EncodingTag,
    pub time_steps: u32,
    pub channels: u32,
    pub num_examples: u32,
    pub num_classes: u32,
}

impl RasterHeader {
    pub fn bytes_per_example(&self) -> usize {
        4 + (self.time_steps as usize * self.channels as usize).div_ceil(8)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u32")))
}

/// Serialize a raster to bytes.
pub fn encode_raster(raster: &SpikeRaster, encoding: EncodingTag) -> Result<Vec<u8>> {
    let (n, t, c) = raster.spikes.dim();
    let header = RasterHeader {
        version: VERSION,
        encoding,
        time_steps: to_u32(t, "time-steps")?,
        channels: to_u32(c, "channels")?,
        num_examples: to_u32(n, "examples")?,
        num_classes: to_u32(raster.num_classes, "classes")?,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + n * header.bytes_per_example());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(encoding.to_byte());
    out.push(0);
    for v in [header.time_steps, header.channels, header.num_examples, header.num_classes] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let packed_len = (t * c).div_ceil(8);
    for (i, example) in raster.spikes.outer_iter().enumerate() {
        out.extend_from_slice(&to_u32(raster.labels[i], "label")?.to_le_bytes());
        let mut packed = vec![0u8; packed_len];
        for (k, &bit) in example.iter().enumerate() {
            if bit != 0 {
                packed[k / 8] |= 1 << (k % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_header(bytes: &[u8]) -> Result<RasterHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("header truncated: need {HEADER_LEN} bytes, have {}", bytes.len()),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, not a spike raster file".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let encoding = EncodingTag::from_byte(bytes[10]).ok_or_else(|| Error::Format {
        offset: 10,
        message: format!("unknown encoding tag {}", bytes[10]),
    })?;
    let header = RasterHeader {
        version,
        encoding,
        time_steps: read_u32(bytes, 12),
        channels: read_u32(bytes, 16),
        num_examples: read_u32(bytes, 20),
        num_classes: read_u32(bytes, 24),
    };
    if header.time_steps == 0 || header.channels == 0 {
        return Err(Error::Format {
            offset: 12,
            message: "time-steps and channels must be positive".into(),
        });
    }
    if header.num_classes == 0 {
        return Err(Error::Format {
            offset: 24,
            message: "number of classes must be positive".into(),
        });
    }
    Ok(header)
}

/// Parse a raster; any inconsistency is an error naming its byte offset.
pub fn decode_raster(bytes: &[u8]) -> Result<(RasterHeader, SpikeRaster)> {
    let header = decode_header(bytes)?;
    let (n, t, c) = (
        header.num_examples as usize,
        header.time_steps as usize,
        header.channels as usize,
    );
    let per = header.bytes_per_example();
    let expected = HEADER_LEN + n * per;
    if bytes.len() < expected {
        let whole = (bytes.len() - HEADER_LEN) / per;
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "payload truncated: example {whole} of {n} incomplete, expected {expected} bytes"
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes after last example", bytes.len() - expected),
        });
    }
    let mut spikes = Array3::zeros((n, t, c));
    let mut labels = Vec::with_capacity(n);
    for (i, mut example) in spikes.outer_iter_mut().enumerate() {
        let base = HEADER_LEN + i * per;
        let label = read_u32(bytes, base);
        if label >= header.num_classes {
            return Err(Error::Format {
                offset: base as u64,
                message: format!("label {label} ≥ {} classes", header.num_classes),
            });
        }
        labels.push(label as usize);
        let packed = &bytes[base + 4..base + per];
        for (k, v) in example.iter_mut().enumerate() {
            *v = (packed[k / 8] >> (k % 8)) & 1;
        }
    }
    let raster = SpikeRaster {
        spikes,
        labels,
        num_classes: header.num_classes as usize,
    };
    Ok((header, raster))
}

pub fn write_raster(path: impl AsRef<Path>, raster: &SpikeRaster, encoding: EncodingTag) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_raster(raster, encoding)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<(RasterHeader, SpikeRaster)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

/// Seeded split into `(train, valid)`; `valid` holds `round(fraction·n)`
/// examples.
pub fn split_train_valid(raster: &SpikeRaster, fraction: f64, seed: u64) -> Result<(SpikeRaster, SpikeRaster)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("split fraction must lie in [0, 1], got {fraction}")));
    }
    let n = raster.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = (fraction * n as f64).round() as usize;
    let (valid, train) = idx.split_at(n_valid);
    Ok((raster.select(train), raster.select(valid)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::randman::{Randman, RandmanSpec};

    fn sample() -> SpikeRaster {
        let spec = RandmanSpec {
            time_steps: 7,
            neurons: 5,
            ..RandmanSpec::default()
        };
        Randman::new(spec).unwrap().sample_batch(9, 0)
    }

    #[test]
    fn byte_layout_of_header() {
        let bytes = encode_raster(&sample(), EncodingTag::TimeRandman).unwrap();
        assert_eq!(&bytes[..8], b"SPKRASTR");
        assert_eq!(bytes[8..10], [1, 0]);
        assert_eq!(bytes[10], 1);
        assert_eq!(read_u32(&bytes, 12), 7);
        assert_eq!(read_u32(&bytes, 16), 5);
        assert_eq!(read_u32(&bytes, 20), 9);
        assert_eq!(read_u32(&bytes, 24), 10);
        assert_eq!(bytes.len(), 28 + 9 * (4 + 5));
    }

    #[test]
    fn round_trip_in_memory() {
        let r = sample();
        let (h, back) = decode_raster(&encode_raster(&r, EncodingTag::Shd).unwrap()).unwrap();
        assert_eq!(h.encoding, EncodingTag::Shd);
        assert_eq!(back, r);
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = encode_raster(&sample(), EncodingTag::Unspecified).unwrap();
        for cut in [3, 27, 29, bytes.len() - 1] {
            let err = decode_raster(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { offset, .. } if offset == cut as u64), "{err}");
        }
    }

    #[test]
    fn bad_magic_version_and_label() {
        let bytes = encode_raster(&sample(), EncodingTag::Unspecified).unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(decode_raster(&b), Err(Error::Format { offset: 0, .. })));
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(matches!(decode_raster(&b), Err(Error::Format { offset: 8, .. })));
        let mut b = bytes.clone();
        b[28..32].copy_from_slice(&77u32.to_le_bytes());
        assert!(matches!(decode_raster(&b), Err(Error::Format { offset: 28, .. })));
        let mut b = bytes;
        b.push(0);
        assert!(decode_raster(&b).is_err());
    }

    #[test]
    fn shd_shaped_header_accepted() {
        let mut spikes = Array3::zeros((2, 50, 700));
        spikes[[1, 49, 699]] = 1;
        spikes[[0, 0, 0]] = 1;
        let r = SpikeRaster::new(spikes, vec![3, 19], 20).unwrap();
        let (h, back) = decode_raster(&encode_raster(&r, EncodingTag::Shd).unwrap()).unwrap();
        assert_eq!((h.time_steps, h.channels, h.num_classes), (50, 700, 20));
        assert_eq!(back, r);
    }

    #[test]
    fn split_sizes_and_partition() {
        let spec = RandmanSpec {
            time_steps: 4,
            neurons: 3,
            ..RandmanSpec::default()
        };
        let r = Randman::new(spec).unwrap().sample_batch(1000, 0);
        let (train, valid) = split_train_valid(&r, 0.1, 5).unwrap();
        assert_eq!((train.len(), valid.len()), (900, 100));
        let (train2, valid2) = split_train_valid(&r, 0.1, 5).unwrap();
        assert_eq!((&train, &valid), (&train2, &valid2));

        // partition check through a tagged copy: label each example by its index
        let tagged = SpikeRaster {
            spikes: Array3::zeros((1000, 1, 1)),
            labels: (0..1000).collect(),
            num_classes: 1000,
        };
        let (t, v) = split_train_valid(&tagged, 0.1, 5).unwrap();
        let mut all: Vec<usize> = t.labels.iter().chain(&v.labels).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
