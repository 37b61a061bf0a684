//! 32-bit carry-propagating range coder over 16-bit frequency tables.
//!
//! Payload layout: `[u16 table checksum][varint symbol count][coder bytes]`,
//! little-endian.

use crate::error::{Error, Result};

use super::tables::{
    escape_bit_len, unzigzag, zigzag, TableSet, ALPHABET_BOUND, ESCAPE_LENGTH_BITS, PRECISION,
};

const TOP: u32 = 1 << 24;
/// Zero bytes the decoder may read past the end of a well-formed stream.
const READ_SLACK: usize = 4;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                // The very first byte only ever holds a carry that cannot occur.
                if self.started {
                    self.out.push(byte.wrapping_add(carry));
                }
                self.started = true;
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows to `[start, start + freq)` out of `2^bits`.
    pub fn encode(&mut self, start: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Uniformly coded `bits`-bit value, `bits <= 16`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        if bits > 0 {
            self.encode(value, 1, bits);
        }
    }

    /// Emits the shortest tail that pins a value inside the final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + self.range as u64;
        let mut zero_bytes = 0;
        for k in (1..=4u32).rev() {
            let mask = (1u64 << (8 * k)) - 1;
            let v = (self.low + mask) & !mask;
            if v < end {
                self.low = v;
                zero_bytes = k;
                break;
            }
        }
        for _ in 0..(5 - zero_bytes) {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        if self.pos > self.data.len() + READ_SLACK {
            return Err(Error::Truncated("range coder read past the end of the stream"));
        }
        Ok(b)
    }

    /// Target frequency in `[0, 2^bits)`; must be followed by `consume`.
    pub fn peek(&mut self, bits: u32) -> u32 {
        let r = self.range >> bits;
        (self.code / r).min((1 << bits) - 1)
    }

    pub fn consume(&mut self, start: u32, freq: u32, bits: u32) -> Result<()> {
        let r = self.range >> bits;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        if bits == 0 {
            return Ok(0);
        }
        let v = self.peek(bits);
        self.consume(v, 1, bits)?;
        Ok(v)
    }
}

pub fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn read_varint(data: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *data
            .get(*pos)
            .ok_or(Error::Truncated("varint runs past the end"))?;
        *pos += 1;
        v |= ((byte & 0x7F) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Truncated("varint longer than 64 bits"))
}

fn encode_escape(enc: &mut RangeEncoder, v: i32) {
    let z = zigzag(v);
    let n = escape_bit_len(v);
    enc.encode_bits(n, ESCAPE_LENGTH_BITS);
    if n > 16 {
        enc.encode_bits(z & 0xFFFF, 16);
        enc.encode_bits(z >> 16, n - 16);
    } else {
        enc.encode_bits(z, n);
    }
}

fn decode_escape(dec: &mut RangeDecoder<'_>) -> Result<i32> {
    let n = dec.decode_bits(ESCAPE_LENGTH_BITS)?;
    if n > 17 {
        return Err(Error::Truncated("escape length exceeds the alphabet bound"));
    }
    let z = if n > 16 {
        let lo = dec.decode_bits(16)?;
        lo | (dec.decode_bits(n - 16)? << 16)
    } else {
        dec.decode_bits(n)?
    };
    Ok(unzigzag(z))
}

/// Codes `values[k]` with table `table_ids[k]` into a framed payload.
pub fn encode_symbols(values: &[i32], table_ids: &[usize], tables: &TableSet) -> Result<Vec<u8>> {
    if values.len() != table_ids.len() {
        return Err(Error::Shape(format!(
            "{} symbols with {} table ids",
            values.len(),
            table_ids.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&v, &t) in values.iter().zip(table_ids) {
        if (v as i64).abs() > ALPHABET_BOUND {
            return Err(Error::SymbolOutOfRange {
                value: v as i64,
                bound: ALPHABET_BOUND,
            });
        }
        let table = tables.get(t)?;
        let idx = table.index_of(v).unwrap_or(table.escape_index());
        enc.encode(table.cum()[idx], table.freq(idx), PRECISION);
        if idx == table.escape_index() {
            encode_escape(&mut enc, v);
        }
    }
    let body = enc.finish();
    let mut out = Vec::with_capacity(body.len() + 6);
    out.extend_from_slice(&tables.checksum().to_le_bytes());
    write_varint(&mut out, values.len() as u64);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Symbol count recorded in a payload header.
pub fn payload_count(payload: &[u8]) -> Result<usize> {
    if payload.len() < 2 {
        return Err(Error::Truncated("payload shorter than its header"));
    }
    let mut pos = 2;
    Ok(read_varint(payload, &mut pos)? as usize)
}

pub fn decode_symbols(payload: &[u8], table_ids: &[usize], tables: &TableSet) -> Result<Vec<i32>> {
    if payload.len() < 2 {
        return Err(Error::Truncated("payload shorter than its header"));
    }
    let found = u16::from_le_bytes([payload[0], payload[1]]);
    if found != tables.checksum() {
        return Err(Error::TableChecksum {
            expected: tables.checksum(),
            found,
        });
    }
    let mut pos = 2;
    let count = read_varint(payload, &mut pos)? as usize;
    if count != table_ids.len() {
        return Err(Error::Shape(format!(
            "payload holds {count} symbols, expected {}",
            table_ids.len()
        )));
    }
    let mut dec = RangeDecoder::new(&payload[pos..])?;
    let mut out = Vec::with_capacity(count);
    for &t in table_ids {
        let table = tables.get(t)?;
        let target = dec.peek(PRECISION);
        let idx = table.lookup(target);
        dec.consume(table.cum()[idx], table.freq(idx), PRECISION)?;
        let v = if idx == table.escape_index() {
            decode_escape(&mut dec)?
        } else {
            table.offset() + idx as i32
        };
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tables::CdfTable;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn skewed() -> TableSet {
        TableSet::new(vec![
            CdfTable::from_pmf(-2, &[0.05, 0.2, 0.5, 0.2, 0.05]).unwrap(),
            CdfTable::from_pmf(0, &[0.999, 0.0009]).unwrap(),
        ])
    }

    #[test]
    fn empty_latent_is_tiny() {
        let t = skewed();
        let p = encode_symbols(&[], &[], &t).unwrap();
        assert!(p.len() <= 8, "{} bytes", p.len());
        assert!(decode_symbols(&p, &[], &t).unwrap().is_empty());
    }

    #[test]
    fn escapes_and_bounds() {
        let t = skewed();
        let vals = [0, 5, -32768, 32768, 2, -3, 1];
        let ids = vec![0; vals.len()];
        let p = encode_symbols(&vals, &ids, &t).unwrap();
        assert_eq!(decode_symbols(&p, &ids, &t).unwrap(), vals);
        assert!(matches!(
            encode_symbols(&[32769], &[0], &t),
            Err(Error::SymbolOutOfRange { .. })
        ));
    }

    #[test]
    fn checksum_and_truncation_errors() {
        let t = skewed();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<i32> = (0..2000).map(|_| rng.random_range(-2..=2)).collect();
        let ids = vec![0; vals.len()];
        let mut p = encode_symbols(&vals, &ids, &t).unwrap();
        let other = TableSet::new(vec![CdfTable::from_pmf(-2, &[0.2; 5]).unwrap()]);
        assert!(matches!(decode_symbols(&p, &ids, &other), Err(Error::TableChecksum { .. })));
        p.truncate(p.len() / 2);
        assert!(matches!(decode_symbols(&p, &ids, &t), Err(Error::Truncated(_))));
    }

    #[test]
    fn all_zero_start_symbols_decode() {
        // Repeating the first symbol keeps `low` at zero, so the tail is empty.
        let t = TableSet::new(vec![CdfTable::from_pmf(0, &[0.5, 0.5]).unwrap()]);
        let vals = vec![0; 500];
        let ids = vec![0; 500];
        let p = encode_symbols(&vals, &ids, &t).unwrap();
        assert_eq!(decode_symbols(&p, &ids, &t).unwrap(), vals);
    }

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-40i32..40, 0..400), which in 0usize..2) {
            let t = skewed();
            let ids = vec![which; vals.len()];
            let p = encode_symbols(&vals, &ids, &t).unwrap();
            prop_assert_eq!(decode_symbols(&p, &ids, &t).unwrap(), vals);
        }

        #[test]
        fn varint_roundtrip(v in any::<u64>()) {
            let mut buf = Vec::new();
            write_varint(&mut buf, v);
            let mut pos = 0;
            prop_assert_eq!(read_varint(&buf, &mut pos).unwrap(), v);
            prop_assert_eq!(pos, buf.len());
        }
    }
}
