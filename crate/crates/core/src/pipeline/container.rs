//! Little-endian container: a checksummed header followed by one unit per frame.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLVC";
pub const VERSION: u8 = 1;
/// Header bytes including the trailing crc32.
pub const HEADER_LEN: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub width: u16,
    pub height: u16,
    pub frame_count: u32,
    pub lambda_id: u8,
    pub model_checksum: u64,
    /// `Enabled::bits()` of the encoding model.
    pub tools: u8,
}

impl ContainerHeader {
    pub fn write(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend(self.width.to_le_bytes());
        out.extend(self.height.to_le_bytes());
        out.extend(self.frame_count.to_le_bytes());
        out.push(self.lambda_id);
        out.extend(self.model_checksum.to_le_bytes());
        out.push(self.tools);
        let crc = crc32fast::hash(&out[start..]);
        out.extend(crc.to_le_bytes());
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Header(format!("{} bytes, need {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Header("bad magic".into()));
        }
        let stored = u32::from_le_bytes(bytes[23..27].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..23]) != stored {
            return Err(Error::Header("header checksum mismatch".into()));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::Header(format!("unsupported version {version}")));
        }
        let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes"));
        let header = Self {
            version,
            width: u16_at(5),
            height: u16_at(7),
            frame_count: u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")),
            lambda_id: bytes[13],
            model_checksum: u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes")),
            tools: bytes[22],
        };
        if header.width == 0 || header.height == 0 {
            return Err(Error::Header("zero frame size".into()));
        }
        Ok(header)
    }
}

pub const KIND_LOSSLESS_INTRA: u8 = 0;
pub const KIND_EXTERNAL_INTRA: u8 = 1;
pub const KIND_P: u8 = 2;

/// One coded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameUnit {
    Intra { kind: u8, blob: Vec<u8> },
    P { mvd: Vec<u8>, res_y: Vec<u8>, res_z: Vec<u8> },
}

impl FrameUnit {
    fn payloads(&self) -> Vec<&[u8]> {
        match self {
            FrameUnit::Intra { blob, .. } => vec![blob],
            FrameUnit::P { mvd, res_y, res_z } => vec![mvd, res_y, res_z],
        }
    }

    pub fn kind(&self) -> u8 {
        match self {
            FrameUnit::Intra { kind, .. } => *kind,
            FrameUnit::P { .. } => KIND_P,
        }
    }

    /// Serialized size: kind byte, u32 lengths and payloads.
    pub fn byte_len(&self) -> usize {
        self.payloads().iter().map(|p| 4 + p.len()).sum::<usize>() + 1
    }

    pub fn write(&self, out: &mut Vec<u8>) -> Result<()> {
        out.push(self.kind());
        let payloads = self.payloads();
        for p in &payloads {
            let len = u32::try_from(p.len()).map_err(|_| Error::Config("payload over 4 GiB".into()))?;
            out.extend(len.to_le_bytes());
        }
        for p in payloads {
            out.extend_from_slice(p);
        }
        Ok(())
    }

    /// Parses one unit from the front of `bytes`, returning it and the bytes consumed.
    pub fn read(bytes: &[u8]) -> Result<(Self, usize)> {
        let (&kind, _) = bytes.split_first().ok_or(Error::Truncated("missing frame unit"))?;
        let count = match kind {
            KIND_LOSSLESS_INTRA | KIND_EXTERNAL_INTRA => 1,
            KIND_P => 3,
            k => return Err(Error::Header(format!("unknown frame kind {k}"))),
        };
        let mut pos = 1;
        let mut lens = Vec::with_capacity(count);
        for _ in 0..count {
            let b = bytes.get(pos..pos + 4).ok_or(Error::Truncated("frame unit lengths"))?;
            lens.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
            pos += 4;
        }
        let mut payloads = Vec::with_capacity(count);
        for len in lens {
            let end = pos.checked_add(len).ok_or(Error::Truncated("frame unit payload"))?;
            payloads.push(bytes.get(pos..end).ok_or(Error::Truncated("frame unit payload"))?.to_vec());
            pos = end;
        }
        let unit = if kind == KIND_P {
            let mut it = payloads.into_iter();
            let (mvd, res_y, res_z) = (it.next(), it.next(), it.next());
            FrameUnit::P {
                mvd: mvd.expect("three payloads"),
                res_y: res_y.expect("three payloads"),
                res_z: res_z.expect("three payloads"),
            }
        } else {
            FrameUnit::Intra {
                kind,
                blob: payloads.pop().expect("one payload"),
            }
        };
        Ok((unit, pos))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub units: Vec<FrameUnit>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.units.len() != self.header.frame_count as usize {
            return Err(Error::Header(format!(
                "{} units for frame count {}",
                self.units.len(),
                self.header.frame_count
            )));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.units.iter().map(FrameUnit::byte_len).sum::<usize>());
        self.header.write(&mut out);
        for u in &self.units {
            u.write(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = ContainerHeader::read(bytes)?;
        let mut pos = HEADER_LEN;
        let mut units = Vec::new();
        for _ in 0..header.frame_count {
            let (unit, used) = FrameUnit::read(&bytes[pos..])?;
            units.push(unit);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(Error::Header(format!("{} trailing bytes", bytes.len() - pos)));
        }
        if units.first().is_some_and(|u| u.kind() == KIND_P) {
            return Err(Error::Header("sequence does not start with an intra frame".into()));
        }
        Ok(Self { header, units })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> ContainerHeader {
        ContainerHeader {
            version: VERSION,
            width: 320,
            height: 256,
            frame_count: 2,
            lambda_id: 64,
            model_checksum: 0x0123_4567_89ab_cdef,
            tools: 7,
        }
    }

    fn sample() -> Container {
        Container {
            header: header(),
            units: vec![
                FrameUnit::Intra {
                    kind: KIND_LOSSLESS_INTRA,
                    blob: vec![1, 2, 3],
                },
                FrameUnit::P {
                    mvd: vec![9; 5],
                    res_y: vec![],
                    res_z: vec![7],
                },
            ],
        }
    }

    #[test]
    fn round_trip_and_size_accounting() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 1 + 4 + 3 + 1 + 12 + 6);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert_eq!(bytes.len(), HEADER_LEN + c.units.iter().map(FrameUnit::byte_len).sum::<usize>());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Container::from_bytes(&longer).is_err());
    }

    proptest! {
        #[test]
        fn any_single_byte_header_corruption_is_rejected(i in 0..HEADER_LEN, flip in 1u8..=255) {
            let mut bytes = sample().to_bytes().unwrap();
            bytes[i] ^= flip;
            prop_assert!(matches!(Container::from_bytes(&bytes), Err(Error::Header(_))));
        }
    }
}
