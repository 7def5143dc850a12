//! Binary genome files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLNG"                      magic, 4 bytes
//! u16                         format version (1)
//! u8                          number of layer dims L
//! u32 x L                     layer dims
//! u8, u8                      hidden / output activation codes
//! u8                          PReLU-per-layer flag
//! u64                         parameter count N
//! f32 x N                     parameters
//! u8                          sigma flag
//! f32 x N                     sigmas (only when the flag is 1)
//! u32                         CRC32 of every preceding byte
//! ```
//!
//! Values are stored as `f32`; in-memory math stays `f64`. A population file
//! is a plain concatenation of genome records.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{HiddenActivation, MlpSpec, OutputActivation};

pub const MAGIC: &[u8; 4] = b"MLNG";
pub const VERSION: u16 = 1;

/// Contents of one genome record.
#[derive(Clone, Debug, PartialEq)]
pub struct GenomeFile {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

/// Rounds to the nearest `f32`, the precision genome files store.
#[inline]
pub fn to_stored_precision(v: f64) -> f64 {
    v as f32 as f64
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    out.reserve(values.len() * 4);
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidConfig(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub fn encode_genome(spec: &MlpSpec, params: &[f64], sigma: Option<&[f64]>) -> Result<Vec<u8>> {
    if params.len() != spec.genome_length() {
        return Err(Error::dims(
            "genome parameter count",
            spec.genome_length(),
            params.len(),
        ));
    }
    if let Some(s) = sigma {
        if s.len() != params.len() {
            return Err(Error::dims("sigma count", params.len(), s.len()));
        }
    }
    let dims = spec.layer_dims();
    let mut out = Vec::with_capacity(32 + dims.len() * 4 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidSpec(format!("layer dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(spec.hidden_activation().code());
    out.push(spec.output_activation().code());
    out.push(u8::from(spec.prelu_per_layer()));
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    push_f32s(&mut out, params)?;
    match sigma {
        Some(s) => {
            out.push(1);
            push_f32s(&mut out, s)?;
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt("count overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Decodes one record from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_genome(bytes: &[u8]) -> Result<(GenomeFile, usize)> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Corrupt("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::NotGenomeFile);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_dims = r.u8()? as usize;
    let dims = (0..n_dims)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let hidden_code = r.u8()?;
    let output_code = r.u8()?;
    let prelu = r.u8()?;
    let count = r.u64()?;
    let count = usize::try_from(count).map_err(|_| Error::Corrupt("parameter count overflow".into()))?;
    // Read payload before interpreting the header so a truncated file is
    // reported as corrupt rather than inconsistent.
    let params = r.f32s(count)?;
    let sigma = match r.u8()? {
        0 => None,
        1 => Some(r.f32s(count)?),
        other => return Err(Error::Corrupt(format!("bad sigma flag {other}"))),
    };
    let body_end = r.pos;
    let stored_crc = r.u32()?;
    if crc32fast::hash(&bytes[..body_end]) != stored_crc {
        return Err(Error::Corrupt("CRC mismatch".into()));
    }

    let hidden = HiddenActivation::from_code(hidden_code)
        .ok_or_else(|| Error::InconsistentHeader(format!("unknown hidden activation {hidden_code}")))?;
    let output = OutputActivation::from_code(output_code)
        .ok_or_else(|| Error::InconsistentHeader(format!("unknown output activation {output_code}")))?;
    if prelu > 1 {
        return Err(Error::InconsistentHeader(format!("bad PReLU flag {prelu}")));
    }
    let spec = MlpSpec::new(dims, hidden, output, prelu == 1).map_err(|e| Error::InconsistentHeader(e.to_string()))?;
    if spec.genome_length() != count {
        return Err(Error::InconsistentHeader(format!(
            "parameter count {count} but spec needs {}",
            spec.genome_length()
        )));
    }
    Ok((GenomeFile { spec, params, sigma }, r.pos))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_genome(path: &Path, spec: &MlpSpec, params: &[f64], sigma: Option<&[f64]>) -> Result<()> {
    let bytes = encode_genome(spec, params, sigma)?;
    write_synced(path, &bytes)
}

pub fn load_genome(path: &Path) -> Result<GenomeFile> {
    let bytes = fs::read(path)?;
    let (g, used) = decode_genome(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(g)
}

pub fn save_population(path: &Path, spec: &MlpSpec, members: &[(&[f64], &[f64])]) -> Result<()> {
    let mut bytes = Vec::new();
    for (params, sigma) in members {
        bytes.extend(encode_genome(spec, params, Some(sigma))?);
    }
    write_synced(path, &bytes)
}

pub fn load_population(path: &Path) -> Result<Vec<GenomeFile>> {
    let bytes = fs::read(path)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (g, used) = decode_genome(&bytes[pos..])?;
        out.push(g);
        pos += used;
    }
    Ok(out)
}

/// Writes `contents` to `path` and syncs it.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_synced(path, contents.as_bytes())
}
