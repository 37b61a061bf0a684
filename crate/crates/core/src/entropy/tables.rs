//! Integer CDF tables shared by encoder and decoder.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
/// Largest magnitude the coder accepts for any symbol.
pub const ALPHABET_BOUND: i64 = 1 << 15;
/// Bits of the escape length prefix; zigzag values need at most 17 bits.
pub const ESCAPE_LENGTH_BITS: u32 = 5;

/// Quantized distribution over `offset .. offset + len` plus a trailing escape symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes `pmf` (values `offset..`) to 16-bit frequencies. Mass missing
    /// from `pmf` goes to the escape symbol; every entry keeps frequency ≥ 1.
    pub fn from_pmf(offset: i32, pmf: &[f64]) -> Result<Self> {
        let n = pmf.len() + 1;
        if n as u32 > TOTAL / 2 {
            return Err(Error::Config(format!("cdf table with {n} entries")));
        }
        let mut p: Vec<f64> = pmf.iter().map(|&v| if v.is_finite() { v.max(0.0) } else { 0.0 }).collect();
        let covered: f64 = p.iter().sum();
        p.push((1.0 - covered).max(0.0));
        let sum: f64 = p.iter().sum();
        let budget = (TOTAL - n as u32) as f64;
        let mut freq: Vec<u32> = p
            .iter()
            .map(|&v| {
                let share = if sum > 0.0 { v / sum } else { 1.0 / n as f64 };
                1 + (share * budget).floor() as u32
            })
            .collect();
        let used: u32 = freq.iter().sum();
        let top = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        freq[top] += TOTAL - used;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { offset, cum })
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Number of in-table values (escape excluded).
    pub fn len(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn escape_index(&self) -> usize {
        self.cum.len() - 2
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    /// In-table index of `value`, or `None` when it must be escaped.
    pub fn index_of(&self, value: i32) -> Option<usize> {
        let i = value as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    /// Symbol whose interval contains `target` (`0 <= target < TOTAL`).
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of `value` under this table, escape payload included.
    pub fn bits(&self, value: i32) -> f64 {
        let total = TOTAL as f64;
        match self.index_of(value) {
            Some(i) => -(self.freq(i) as f64 / total).log2(),
            None => {
                -(self.freq(self.escape_index()) as f64 / total).log2()
                    + (ESCAPE_LENGTH_BITS + escape_bit_len(value)) as f64
            }
        }
    }
}

pub(crate) fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

pub(crate) fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

pub(crate) fn escape_bit_len(v: i32) -> u32 {
    32 - zigzag(v).leading_zeros()
}

/// Tables for one stream, indexed by channel or by scale bin, plus their checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSet {
    tables: Vec<CdfTable>,
    checksum: u16,
}

impl TableSet {
    pub fn new(tables: Vec<CdfTable>) -> Self {
        let mut h = Sha256::new();
        h.update((tables.len() as u64).to_le_bytes());
        for t in &tables {
            h.update(t.offset.to_le_bytes());
            h.update((t.cum.len() as u64).to_le_bytes());
            for c in &t.cum {
                h.update(c.to_le_bytes());
            }
        }
        let d = h.finalize();
        Self {
            tables,
            checksum: u16::from_le_bytes([d[0], d[1]]),
        }
    }

    pub fn checksum(&self) -> u16 {
        self.checksum
    }

    pub fn get(&self, i: usize) -> Result<&CdfTable> {
        self.tables
            .get(i)
            .ok_or_else(|| Error::Shape(format!("table index {i} of {}", self.tables.len())))
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Ideal bits of `values` where `values[k]` uses table `table_ids[k]`.
    pub fn bits(&self, values: &[i32], table_ids: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (&v, &t) in values.iter().zip(table_ids) {
            total += self.get(t)?.bits(v);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequencies_sum_to_total_and_stay_positive() {
        let t = CdfTable::from_pmf(-3, &[0.0, 1e-12, 0.25, 0.5, 0.25, 0.0, 0.0]).unwrap();
        assert_eq!(*t.cum().last().unwrap(), TOTAL);
        for i in 0..=t.len() {
            assert!(t.freq(i) >= 1);
        }
        assert_eq!(t.index_of(0), Some(3));
        assert_eq!(t.index_of(4), None);
        assert_eq!(t.lookup(0), 0);
        assert_eq!(t.lookup(TOTAL - 1), t.escape_index());
    }

    #[test]
    fn zigzag_roundtrip() {
        for v in [-32768, -5, -1, 0, 1, 7, 32768] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
        assert_eq!(escape_bit_len(32768), 17);
        assert_eq!(escape_bit_len(0), 0);
    }

    #[test]
    fn checksum_tracks_content() {
        let a = TableSet::new(vec![CdfTable::from_pmf(0, &[0.5, 0.5]).unwrap()]);
        let b = TableSet::new(vec![CdfTable::from_pmf(0, &[0.4, 0.6]).unwrap()]);
        let c = TableSet::new(vec![CdfTable::from_pmf(1, &[0.5, 0.5]).unwrap()]);
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a, a.clone());
    }
}
