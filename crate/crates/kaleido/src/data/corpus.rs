//! Corpus container: magic `KBCORP01`, then length-prefixed records.
//!
//! All integers and floats are little-endian. Each record is prefixed by
//! its u32 byte length and holds: product id (u64), image shape as
//! height/width/channels (3 x u32), the raw f32 image, token count (u16)
//! and token ids (u16 each), alignment count (u16) and alignments as
//! (u16 token index, 4 x f32 rect), then category and subcategory (u16).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Rect;
use crate::error::{KbError, Result};

pub const CORPUS_MAGIC: &[u8; 8] = b"KBCORP01";

/// One product: image, caption tokens, ground-truth alignments, labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub product_id: u64,
    pub height: u32,
    pub width: u32,
    /// Row-major HxWx3, values in [0,1].
    pub image: Vec<f32>,
    pub tokens: Vec<u16>,
    /// (token index, anchor rectangle in normalized image coordinates).
    pub alignments: Vec<(u16, Rect)>,
    pub category: u16,
    pub subcategory: u16,
}

impl CorpusRecord {
    fn encoded_len(&self) -> usize {
        8 + 12
            + self.image.len() * 4
            + 2
            + self.tokens.len() * 2
            + 2
            + self.alignments.len() * (2 + 16)
            + 4
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.product_id.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        for &v in &self.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tokens.len() as u16).to_le_bytes());
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&(self.alignments.len() as u16).to_le_bytes());
        for (idx, rect) in &self.alignments {
            out.extend_from_slice(&idx.to_le_bytes());
            for v in [rect.x1, rect.y1, rect.x2, rect.y2] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.category.to_le_bytes());
        out.extend_from_slice(&self.subcategory.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(KbError::format_at(self.record, "truncated record"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes records in the given (id) order.
pub fn write_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CORPUS_MAGIC)?;
    let mut buf = Vec::new();
    for rec in records {
        buf.clear();
        buf.reserve(rec.encoded_len());
        rec.encode(&mut buf);
        w.write_all(&(buf.len() as u32).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != CORPUS_MAGIC {
        return Err(KbError::format(format!(
            "bad corpus magic in {}",
            path.display()
        )));
    }
    let mut records = Vec::new();
    let mut pos = 8;
    let mut record_idx = 0usize;
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(KbError::format_at(record_idx, "truncated length prefix"));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len > bytes.len() {
            return Err(KbError::format_at(record_idx, "record extends past end of file"));
        }
        let mut c = Cursor { buf: &bytes[pos..pos + len], pos: 0, record: record_idx };
        let rec = decode_record(&mut c)?;
        if c.pos != len {
            return Err(KbError::format_at(record_idx, "record has trailing bytes"));
        }
        records.push(rec);
        pos += len;
        record_idx += 1;
    }
    Ok(records)
}

fn decode_record(c: &mut Cursor) -> Result<CorpusRecord> {
    let product_id = c.u64()?;
    let height = c.u32()?;
    let width = c.u32()?;
    let channels = c.u32()?;
    if channels != 3 {
        return Err(KbError::format_at(c.record, format!("expected 3 channels, got {channels}")));
    }
    let numel = (height as usize) * (width as usize) * 3;
    if numel > 64 << 20 {
        return Err(KbError::format_at(c.record, "implausible image size"));
    }
    let mut image = Vec::with_capacity(numel);
    for _ in 0..numel {
        image.push(c.f32()?);
    }
    let n_tokens = c.u16()? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(c.u16()?);
    }
    let n_aligns = c.u16()? as usize;
    let mut alignments = Vec::with_capacity(n_aligns);
    for _ in 0..n_aligns {
        let idx = c.u16()?;
        if idx as usize >= n_tokens {
            return Err(KbError::format_at(
                c.record,
                format!("alignment token index {idx} >= token count {n_tokens}"),
            ));
        }
        let rect = Rect { x1: c.f32()?, y1: c.f32()?, x2: c.f32()?, y2: c.f32()? };
        alignments.push((idx, rect));
    }
    let category = c.u16()?;
    let subcategory = c.u16()?;
    Ok(CorpusRecord {
        product_id,
        height,
        width,
        image,
        tokens,
        alignments,
        category,
        subcategory,
    })
}
