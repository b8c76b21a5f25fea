//! Token-grid export (`tokenize` output) and the attention dump written by
//! evaluation with capture enabled. Both are little-endian, magic-guarded,
//! versioned, and round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::recording::Cursor;
use super::{DataIoError, Result};

pub const TOKENGRID_MAGIC: &[u8; 4] = b"NLTG";
pub const TOKENGRID_VERSION: u16 = 1;

/// Codebook indices of one tokenized sample: `[C, N]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGridFile {
    pub n_channels: u16,
    pub n_patches: u64,
    pub codebook_size: u32,
    pub indices: Vec<u32>,
}

pub fn write_token_grid(path: &Path, grid: &TokenGridFile) -> Result<()> {
    if grid.indices.len() != grid.n_channels as usize * grid.n_patches as usize {
        return Err(DataIoError::Format("token grid length mismatch".into()));
    }
    if grid.indices.iter().any(|&i| i >= grid.codebook_size) {
        return Err(DataIoError::Format("token index out of codebook range".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(TOKENGRID_MAGIC);
    buf.extend_from_slice(&TOKENGRID_VERSION.to_le_bytes());
    buf.extend_from_slice(&grid.n_channels.to_le_bytes());
    buf.extend_from_slice(&grid.n_patches.to_le_bytes());
    buf.extend_from_slice(&grid.codebook_size.to_le_bytes());
    for &i in &grid.indices {
        buf.extend_from_slice(&i.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_token_grid(path: &Path) -> Result<TokenGridFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != TOKENGRID_MAGIC {
        return Err(DataIoError::BadMagic { expected: "NLTG", found: magic.to_vec() });
    }
    let version = cur.u16()?;
    if version != TOKENGRID_VERSION {
        return Err(DataIoError::BadVersion(version));
    }
    let n_channels = cur.u16()?;
    let n_patches = cur.u64()?;
    let codebook_size = cur.u32()?;
    let count = n_channels as usize * n_patches as usize;
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        indices.push(cur.u32()?);
    }
    if cur.pos != bytes.len() {
        return Err(DataIoError::Format("trailing bytes".into()));
    }
    let grid = TokenGridFile { n_channels, n_patches, codebook_size, indices };
    if grid.indices.iter().any(|&i| i >= grid.codebook_size) {
        return Err(DataIoError::Format("token index out of codebook range".into()));
    }
    Ok(grid)
}

pub const ATTN_MAGIC: &[u8; 4] = b"NLAT";
pub const ATTN_VERSION: u16 = 1;

/// Attention rows for flagged query positions: layer-major, then head,
/// then flagged row, each row of `seq_len` probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub n_layers: u16,
    pub n_heads: u16,
    pub seq_len: u32,
    pub flagged: Vec<u32>,
    pub rows: Vec<f32>,
}

impl AttentionDump {
    pub fn expected_rows(&self) -> usize {
        self.n_layers as usize * self.n_heads as usize * self.flagged.len() * self.seq_len as usize
    }
}

pub fn write_attention_dump(path: &Path, dump: &AttentionDump) -> Result<()> {
    if dump.rows.len() != dump.expected_rows() {
        return Err(DataIoError::Format("attention dump length mismatch".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(ATTN_MAGIC);
    buf.extend_from_slice(&ATTN_VERSION.to_le_bytes());
    buf.extend_from_slice(&dump.n_layers.to_le_bytes());
    buf.extend_from_slice(&dump.n_heads.to_le_bytes());
    buf.extend_from_slice(&dump.seq_len.to_le_bytes());
    buf.extend_from_slice(&(dump.flagged.len() as u32).to_le_bytes());
    for &f in &dump.flagged {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    for &v in &dump.rows {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_attention_dump(path: &Path) -> Result<AttentionDump> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != ATTN_MAGIC {
        return Err(DataIoError::BadMagic { expected: "NLAT", found: magic.to_vec() });
    }
    let version = cur.u16()?;
    if version != ATTN_VERSION {
        return Err(DataIoError::BadVersion(version));
    }
    let n_layers = cur.u16()?;
    let n_heads = cur.u16()?;
    let seq_len = cur.u32()?;
    let n_flagged = cur.u32()? as usize;
    let mut flagged = Vec::with_capacity(n_flagged);
    for _ in 0..n_flagged {
        flagged.push(cur.u32()?);
    }
    let count = n_layers as usize * n_heads as usize * n_flagged * seq_len as usize;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let b = cur.take(4)?;
        rows.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    }
    if cur.pos != bytes.len() {
        return Err(DataIoError::Format("trailing bytes".into()));
    }
    Ok(AttentionDump { n_layers, n_heads, seq_len, flagged, rows })
}
