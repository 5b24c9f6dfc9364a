//! `.mlv2` container: fixed big-endian header followed by length-prefixed
//! payloads.

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MLv2";
pub const VERSION: u8 = 1;
pub const FLAG_SKIP: u8 = 1;
pub const FLAG_REFINED: u8 = 1 << 1;
pub const FLAG_BUCKETED: u8 = 1 << 2;
pub const HEADER_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub orig_h: u16,
    pub orig_w: u16,
    pub model_id: u8,
    pub lambda_index: u8,
    pub num_slices: u8,
    pub flags: u8,
}

impl Header {
    pub fn skip(&self) -> bool {
        self.flags & FLAG_SKIP != 0
    }

    pub fn refined(&self) -> bool {
        self.flags & FLAG_REFINED != 0
    }

    pub fn bucketed(&self) -> bool {
        self.flags & FLAG_BUCKETED != 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z_payload: Vec<u8>,
    /// `[anchor, non-anchor]` payloads per slice.
    pub slices: Vec<[Vec<u8>; 2]>,
}

fn write_payload(out: &mut Vec<u8>, p: &[u8]) -> Result<()> {
    let len = u32::try_from(p.len()).map_err(|_| Error::Format("payload exceeds 4 GiB".into()))?;
    out.write_u32::<BigEndian>(len)?;
    out.extend_from_slice(p);
    Ok(())
}

fn read_payload(r: &mut &[u8], what: &str) -> Result<Vec<u8>> {
    let len = r.read_u32::<BigEndian>().map_err(|_| Error::Parse(format!("truncated length of {what}")))? as usize;
    if r.len() < len {
        return Err(Error::Parse(format!("{what} declares {len} bytes, {} remain", r.len())));
    }
    let (p, rest) = r.split_at(len);
    *r = rest;
    Ok(p.to_vec())
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.slices.len() != self.header.num_slices as usize {
            return Err(Error::Format(format!(
                "header declares {} slices, {} payload pairs present",
                self.header.num_slices,
                self.slices.len()
            )));
        }
        let h = &self.header;
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.write_u16::<BigEndian>(h.orig_h)?;
        out.write_u16::<BigEndian>(h.orig_w)?;
        out.extend_from_slice(&[h.model_id, h.lambda_index, h.num_slices, h.flags]);
        write_payload(&mut out, &self.z_payload)?;
        for pair in &self.slices {
            for p in pair {
                write_payload(&mut out, p)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an MLv2 bitstream (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {}", bytes[4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse("truncated header".into()));
        }
        let mut r = &bytes[5..];
        let orig_h = r.read_u16::<BigEndian>()?;
        let orig_w = r.read_u16::<BigEndian>()?;
        let header = Header {
            orig_h,
            orig_w,
            model_id: r.read_u8()?,
            lambda_index: r.read_u8()?,
            num_slices: r.read_u8()?,
            flags: r.read_u8()?,
        };
        let z_payload = read_payload(&mut r, "hyper-latent payload")?;
        let mut slices = Vec::with_capacity(header.num_slices as usize);
        for i in 0..header.num_slices {
            let a = read_payload(&mut r, &format!("slice {i} anchor payload"))?;
            let n = read_payload(&mut r, &format!("slice {i} non-anchor payload"))?;
            slices.push([a, n]);
        }
        if !r.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after last payload", r.len())));
        }
        Ok(Bitstream { header, z_payload, slices })
    }

    /// Serialized size in bytes.
    pub fn len(&self) -> usize {
        HEADER_LEN + 4 + self.z_payload.len() + self.slices.iter().map(|[a, n]| 8 + a.len() + n.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_foreign_data() {
        assert!(matches!(Bitstream::from_bytes(b"PNG\x89abcdefghijkl"), Err(Error::Format(_))));
        let mut ok = Bitstream {
            header: Header { orig_h: 3, orig_w: 4, model_id: 1, lambda_index: 0, num_slices: 1, flags: 0 },
            z_payload: vec![1, 2],
            slices: vec![[vec![3], vec![]]],
        }
        .to_bytes()
        .unwrap();
        assert_eq!(ok.len(), HEADER_LEN + 4 + 2 + 8 + 1);
        ok.pop();
        assert!(matches!(Bitstream::from_bytes(&ok), Err(Error::Parse(_))));
        ok[4] = 9;
        assert!(matches!(Bitstream::from_bytes(&ok), Err(Error::Format(_))));
    }
}
