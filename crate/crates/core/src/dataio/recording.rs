//! Recording container: a little-endian binary file holding one
//! multi-channel EEG time series.
//!
//! Layout (all little-endian):
//! ```text
//! magic      b"NLM1"
//! version    u16
//! n_channels u16
//! rate_hz    f64
//! n_samples  u64
//! names      n_channels x (u8 length + ASCII bytes)
//! payload    n_channels * n_samples * f32, row-major channel x time, µV
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::signal::{LineFreq, RawRecording};

use super::registry;
use super::{DataIoError, Result};

pub const RECORDING_MAGIC: &[u8; 4] = b"NLM1";
pub const RECORDING_VERSION: u16 = 1;

pub fn write_recording(path: &Path, rec: &RawRecording) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORDING_MAGIC);
    buf.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    let c = rec.n_channels();
    if c > u16::MAX as usize {
        return Err(DataIoError::Format("too many channels".into()));
    }
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend_from_slice(&rec.sampling_rate.to_le_bytes());
    buf.extend_from_slice(&(rec.n_samples() as u64).to_le_bytes());
    for name in &rec.channel_ids {
        if !name.is_ascii() || name.len() > u8::MAX as usize {
            return Err(DataIoError::Format(format!("channel name {name:?} not ASCII-short")));
        }
        if !registry::is_known(name) {
            return Err(DataIoError::UnknownChannel(name.clone()));
        }
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
    }
    for &v in &rec.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a recording. The container does not store the line frequency;
/// the caller supplies it from run configuration.
pub fn read_recording(path: &Path, line_freq: LineFreq) -> Result<RawRecording> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != RECORDING_MAGIC {
        return Err(DataIoError::BadMagic { expected: "NLM1", found: magic.to_vec() });
    }
    let version = cur.u16()?;
    if version != RECORDING_VERSION {
        return Err(DataIoError::BadVersion(version));
    }
    let n_channels = cur.u16()? as usize;
    let rate = cur.f64()?;
    let n_samples = cur.u64()? as usize;
    let mut names = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let len = cur.u8()? as usize;
        let raw = cur.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| DataIoError::Format("channel name not UTF-8".into()))?
            .to_string();
        if !registry::is_known(&name) {
            return Err(DataIoError::UnknownChannel(name));
        }
        names.push(name);
    }
    let payload_len = n_channels
        .checked_mul(n_samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataIoError::Format("payload size overflow".into()))?;
    let raw = cur.take(payload_len)?;
    if cur.pos != bytes.len() {
        return Err(DataIoError::Format("trailing bytes after payload".into()));
    }
    let mut samples = Vec::with_capacity(n_channels * n_samples);
    for chunk in raw.chunks_exact(4) {
        samples.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    RawRecording::new(names, rate, samples, line_freq)
        .map_err(|e| DataIoError::Format(e.to_string()))
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DataIoError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        let b = self.take(16)?;
        Ok(u128::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn string_u16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DataIoError::Format("bad UTF-8".into()))
    }

    pub fn string_u32(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DataIoError::Format("bad UTF-8".into()))
    }
}

pub(crate) fn push_string_u16(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) fn push_string_u32(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}
