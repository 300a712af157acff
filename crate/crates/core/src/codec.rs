//! Little-endian binary framing shared by the checkpoint, adapter and
//! retriever files: a 4-byte magic, a body, and a trailing SHA-256 over all
//! preceding bytes.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// Digest binding a set of documents: SHA-256 over their sorted content
/// hashes, newline-joined.
pub fn manifest_hash<'a>(content_hashes: impl IntoIterator<Item = &'a str>) -> String {
    let mut hashes: Vec<&str> = content_hashes.into_iter().collect();
    hashes.sort_unstable();
    sha256_hex(hashes.join("\n").as_bytes())
}

pub fn hash_from_hex(s: &str) -> Result<[u8; 32]> {
    let raw = hex::decode(s).map_err(|e| Error::Format(format!("bad hash {s:?}: {e}")))?;
    raw.try_into().map_err(|_| Error::Format(format!("hash {s:?} is not 32 bytes")))
}

pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut e = Self { buf: magic.to_vec() };
        e.u32(version);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = sha256(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct Decoder<'a> {
    body: &'a [u8],
    pos: usize,
    pub version: u32,
}

impl<'a> Decoder<'a> {
    /// Verifies magic and trailing digest.
    pub fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(Error::Format("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        if &body[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&body[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut d = Self { body, pos: 4, version: 0 };
        d.version = d.u32()?;
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.body.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_tamper_detection() {
        let mut e = Encoder::new(b"TEST", 3);
        e.str("group-a");
        e.f32s(&[1.5, -2.0]);
        e.u64(42);
        let bytes = e.finish();

        let mut d = Decoder::new(&bytes, b"TEST").unwrap();
        assert_eq!(d.version, 3);
        assert_eq!(d.str().unwrap(), "group-a");
        assert_eq!(d.f32s(2).unwrap(), vec![1.5, -2.0]);
        assert_eq!(d.u64().unwrap(), 42);
        d.finish().unwrap();

        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(Decoder::new(&bad, b"TEST").is_err());
        assert!(Decoder::new(&bytes, b"NOPE").is_err());
    }
}
