//! Binary trace container and CSV export.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SQDMTRC1"
//! version  u32      1
//! flags    u32      bit 0: full tensors follow the fractions
//! C, T, H, W  u32 each
//! per step t:
//!   C x f32         zero fraction of each channel
//!   if bit 0, per channel:
//!     ceil(H*W/8) bytes  occupancy bitmap, bit i of byte i/8 = element i
//!     popcount x f32     nonzero values in position order
//! ```

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::tensorkit::{bitmap_bytes, CompressedChannel};

use super::SparsityTrace;

pub const TRACE_MAGIC: &[u8; 8] = b"SQDMTRC1";
pub const TRACE_VERSION: u32 = 1;
const FLAG_TENSORS: u32 = 1;

pub fn serialize_trace(trace: &SparsityTrace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    let flags = if trace.has_tensors() { FLAG_TENSORS } else { 0 };
    for v in [
        TRACE_VERSION,
        flags,
        trace.channels() as u32,
        trace.timesteps() as u32,
        trace.height() as u32,
        trace.width() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let c = trace.channels();
    for t in 0..trace.timesteps() {
        for f in trace.step(t) {
            out.extend_from_slice(&f.to_le_bytes());
        }
        if let Some(tensors) = trace.tensors() {
            for cc in &tensors[t * c..(t + 1) * c] {
                out.extend_from_slice(cc.bitmap());
                for v in cc.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format_at(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn parse_trace(bytes: &[u8]) -> Result<SparsityTrace> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8, "magic")? != TRACE_MAGIC {
        return Err(Error::format_at(0, "bad magic"));
    }
    let version = cur.u32("version")?;
    if version != TRACE_VERSION {
        return Err(Error::format_at(8, format!("unsupported version {version}")));
    }
    let flags = cur.u32("flags")?;
    if flags & !FLAG_TENSORS != 0 {
        return Err(Error::format_at(12, format!("unknown flags {flags:#x}")));
    }
    let c = cur.u32("channel count")? as usize;
    let t = cur.u32("step count")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let with_tensors = flags & FLAG_TENSORS != 0;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format_at(24, "tensor size overflows"))?;
    // every fraction takes 4 bytes; reject absurd headers before allocating
    let cells = c
        .checked_mul(t)
        .filter(|cells| cells.saturating_mul(4) <= bytes.len())
        .ok_or_else(|| Error::format_at(16, "header dimensions exceed the data"))?;
    let mut fractions = Vec::with_capacity(cells);
    let mut tensors = with_tensors.then(|| Vec::with_capacity(cells));
    let nbytes = bitmap_bytes(n);
    for _ in 0..t {
        for _ in 0..c {
            let at = cur.pos;
            let f = cur.f32("sparsity fraction")?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::format_at(at, format!("sparsity fraction {f} outside [0, 1]")));
            }
            fractions.push(f);
        }
        if let Some(ts) = tensors.as_mut() {
            for _ in 0..c {
                let at = cur.pos;
                let bitmap = cur.take(nbytes, "bitmap")?.to_vec();
                let nnz: usize = bitmap.iter().map(|b| b.count_ones() as usize).sum();
                let mut values = Vec::with_capacity(nnz.min(n));
                for _ in 0..nnz {
                    values.push(cur.f32("channel value")?);
                }
                let cc = CompressedChannel::from_parts(n, bitmap, values)
                    .map_err(|e| Error::format_at(at, e.to_string()))?;
                ts.push(cc);
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format_at(
            cur.pos,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    SparsityTrace::from_parts(c, t, h, w, fractions, tensors).map_err(|e| Error::format(e.to_string()))
}

/// `timestep,channel,sparsity` rows, one per cell, step-major.
pub fn trace_csv(trace: &SparsityTrace) -> String {
    let mut s = String::from("timestep,channel,sparsity\n");
    for t in 0..trace.timesteps() {
        for (c, f) in trace.step(t).iter().enumerate() {
            writeln!(s, "{t},{c},{f}").expect("write to string");
        }
    }
    s
}
