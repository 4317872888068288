//! Byte-renormalized rANS over frozen frequency tables.
//!
//! State lives in `[RANS_L, RANS_L · 256)`. The encoder walks the symbols
//! backwards and starts from `RANS_L`, so a correct decode ends exactly on
//! `RANS_L` with every payload byte consumed; anything else is a desync.
//!
//! An escaped symbol is coded as the table's escape slot followed by the raw
//! 32-bit value in two 16-bit halves, each with frequency 1 at precision 16.

use crate::bytes::{Reader, Writer};
use crate::entropy::PmfTable;
use crate::error::{Error, Result};

pub const RANS_L: u32 = 1 << 23;
const RAW_PRECISION: u32 = 16;
/// Wire size of the chunk header.
pub const CHUNK_HEADER_BYTES: usize = 12;

/// Symbols with the table each position is coded under.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolStream {
    pub symbols: Vec<i32>,
    pub table_ids: Vec<u32>,
}

impl SymbolStream {
    pub fn new(symbols: Vec<i32>, table_ids: Vec<u32>) -> Result<Self> {
        if symbols.len() != table_ids.len() {
            return Err(Error::Config(format!(
                "{} symbols but {} table ids",
                symbols.len(),
                table_ids.len()
            )));
        }
        Ok(Self { symbols, table_ids })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedChunk {
    pub symbol_count: u32,
    pub checksum: u32,
    pub payload: Vec<u8>,
}

impl EncodedChunk {
    /// Total wire size including the header.
    pub fn wire_len(&self) -> usize {
        CHUNK_HEADER_BYTES + self.payload.len()
    }

    pub(crate) fn write(&self, w: &mut Writer) -> Result<()> {
        w.u32(self.symbol_count);
        w.dim32(self.payload.len(), "chunk payload")?;
        w.u32(self.checksum);
        w.bytes(&self.payload);
        Ok(())
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let symbol_count = r.u32()?;
        let len = r.u32()? as usize;
        let checksum = r.u32()?;
        let payload = r.take(len)?.to_vec();
        Ok(Self {
            symbol_count,
            checksum,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        self.write(&mut w)?;
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let chunk = Self::read(&mut r)?;
        r.finish()?;
        Ok(chunk)
    }

    /// Fails on a payload that does not match its stored checksum.
    pub fn verify(&self) -> Result<()> {
        let computed = crc32fast::hash(&self.payload);
        if computed != self.checksum {
            return Err(Error::Checksum {
                stored: self.checksum,
                computed,
            });
        }
        Ok(())
    }
}

struct Encoder {
    state: u32,
    /// Bytes in reverse emission order.
    out: Vec<u8>,
}

impl Encoder {
    fn put(&mut self, start: u32, freq: u32, precision: u32) {
        debug_assert!(freq > 0);
        let x_max = ((RANS_L >> precision) << 8) * freq;
        while self.state >= x_max {
            self.out.push(self.state as u8);
            self.state >>= 8;
        }
        self.state = ((self.state / freq) << precision) + self.state % freq + start;
    }

    fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&self.state.to_le_bytes());
        self.out.reverse();
        self.out
    }
}

struct Decoder<'a> {
    state: u32,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Decode {
                position: 0,
                msg: format!("payload of {} bytes cannot hold a state", bytes.len()),
            });
        }
        let state = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if state < RANS_L {
            return Err(Error::Decode {
                position: 0,
                msg: "initial state below lower bound".into(),
            });
        }
        Ok(Self { state, bytes, at: 4 })
    }

    fn peek(&self, precision: u32) -> u32 {
        self.state & ((1 << precision) - 1)
    }

    fn advance(&mut self, start: u32, freq: u32, precision: u32, position: usize) -> Result<()> {
        self.state = freq * (self.state >> precision) + self.peek(precision) - start;
        while self.state < RANS_L {
            let Some(&b) = self.bytes.get(self.at) else {
                return Err(Error::Decode {
                    position,
                    msg: "payload exhausted".into(),
                });
            };
            self.state = (self.state << 8) | b as u32;
            self.at += 1;
        }
        Ok(())
    }
}

/// Encodes `symbols`, position `i` under `table_for(i)`.
pub fn encode_with<'t>(
    symbols: &[i32],
    table_for: impl Fn(usize) -> &'t PmfTable,
) -> Result<EncodedChunk> {
    let count = u32::try_from(symbols.len())
        .map_err(|_| Error::Coding { position: u32::MAX as usize, msg: "too many symbols".into() })?;
    let mut enc = Encoder {
        state: RANS_L,
        out: Vec::new(),
    };
    for (i, &s) in symbols.iter().enumerate().rev() {
        let table = table_for(i);
        let slot = table.slot(s).ok_or_else(|| Error::Coding {
            position: i,
            msg: format!("symbol {s} outside support {:?} without escape", table.support()),
        })?;
        if Some(slot) == table.escape_slot() {
            let raw = s as u32;
            enc.put(raw >> 16, 1, RAW_PRECISION);
            enc.put(raw & 0xFFFF, 1, RAW_PRECISION);
        }
        let (start, freq) = table.interval(slot);
        enc.put(start, freq, table.precision());
    }
    let payload = if symbols.is_empty() { Vec::new() } else { enc.finish() };
    Ok(EncodedChunk {
        symbol_count: count,
        checksum: crc32fast::hash(&payload),
        payload,
    })
}

/// Decodes `n` symbols, position `i` under `table_for(i)`.
pub fn decode_with<'t>(
    chunk: &EncodedChunk,
    n: usize,
    table_for: impl Fn(usize) -> &'t PmfTable,
) -> Result<Vec<i32>> {
    chunk.verify()?;
    if n != chunk.symbol_count as usize {
        return Err(Error::Decode {
            position: chunk.symbol_count as usize,
            msg: format!("requested {n} symbols, chunk holds {}", chunk.symbol_count),
        });
    }
    if n == 0 {
        if !chunk.payload.is_empty() {
            return Err(Error::Decode {
                position: 0,
                msg: "empty chunk with payload".into(),
            });
        }
        return Ok(Vec::new());
    }
    let mut dec = Decoder::new(&chunk.payload)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let table = table_for(i);
        let p = table.precision();
        let slot = table.slot_for(dec.peek(p));
        let (start, freq) = table.interval(slot);
        dec.advance(start, freq, p, i)?;
        if Some(slot) == table.escape_slot() {
            let lo = dec.peek(RAW_PRECISION);
            dec.advance(lo, 1, RAW_PRECISION, i)?;
            let hi = dec.peek(RAW_PRECISION);
            dec.advance(hi, 1, RAW_PRECISION, i)?;
            out.push(((hi << 16) | lo) as i32);
        } else {
            out.push(table.symbol_of_slot(slot));
        }
    }
    if dec.state != RANS_L || dec.at != chunk.payload.len() {
        return Err(Error::Decode {
            position: n,
            msg: format!(
                "state desync: final state {:#x}, {} of {} bytes consumed",
                dec.state,
                dec.at,
                chunk.payload.len()
            ),
        });
    }
    Ok(out)
}

pub fn encode_symbols(stream: &SymbolStream, tables: &[PmfTable]) -> Result<EncodedChunk> {
    check_ids(&stream.table_ids, tables)?;
    encode_with(&stream.symbols, |i| &tables[stream.table_ids[i] as usize])
}

/// Decodes one symbol per entry of `table_ids`.
pub fn decode_symbols(chunk: &EncodedChunk, tables: &[PmfTable], table_ids: &[u32]) -> Result<SymbolStream> {
    check_ids(table_ids, tables)?;
    let symbols = decode_with(chunk, table_ids.len(), |i| &tables[table_ids[i] as usize])?;
    SymbolStream::new(symbols, table_ids.to_vec())
}

fn check_ids(ids: &[u32], tables: &[PmfTable]) -> Result<()> {
    match ids.iter().position(|&id| id as usize >= tables.len()) {
        Some(position) => Err(Error::Coding {
            position,
            msg: format!("table id {} of {} tables", ids[position], tables.len()),
        }),
        None => Ok(()),
    }
}

/// Ideal code length in bits of `symbols` under their tables.
pub fn cross_entropy_bits<'t>(symbols: &[i32], table_for: impl Fn(usize) -> &'t PmfTable) -> Option<f64> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| table_for(i).code_length_bits(s))
        .sum()
}
