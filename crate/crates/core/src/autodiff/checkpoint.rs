//! Binary checkpoint format for parameter sets.
//!
//! Layout (all integers little-endian):
//!   magic  b"CFWT"
//!   version u8
//!   count  u32
//!   then per parameter, in name order:
//!     name_len u16, name bytes (UTF-8)
//!     rank u8, dims u32 × rank
//!     values f32 × prod(dims)
//!
//! Values round-trip bitwise. Decoding validates every length against the
//! remaining buffer before allocating, so truncated or corrupt input fails
//! with a `Format` error instead of a huge allocation or a panic.

use crate::autodiff::{Param, ParamSet};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CFWT";
pub const VERSION: u8 = 1;

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "parameter name too long");
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        assert!(p.shape.len() <= u8::MAX as usize);
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let s = self.take(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("parameter count")? as usize;
    let mut params = ParamSet::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name_at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(name_at, "parameter name is not UTF-8".to_string()))?
            .to_string();
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::format(name_at, format!("parameter names out of order at `{name}`")));
            }
        }
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let at = c.pos;
            let d = c.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero dimension in checkpoint shape".to_string()));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, "shape overflows".to_string()))?;
            shape.push(d);
        }
        let byte_len = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format(c.pos, "shape overflows".to_string()))?;
        let payload = c.take(byte_len, "values")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name.clone(), Param::new(data, shape));
        prev_name = Some(name);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<ParamSet> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_set() -> ParamSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        p.insert("a.weight", Param::new((0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![2, 3, 4]));
        p.insert("a.bias", Param::new(vec![0.5, -0.25], vec![2]));
        p.insert("z.scale", Param::new(vec![1.0e-30], vec![1]));
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample_set();
        let bytes = to_bytes(&p);
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(p.len(), q.len());
        for ((na, pa), (nb, pb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.shape, pb.shape);
            assert!(pa.data.iter().zip(&pb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_buffer_reports_offset() {
        let bytes = to_bytes(&sample_set());
        for cut in [0, 3, 5, 9, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(crate::error::Error::Format { .. }) => {}
                other => panic!("expected Format error at cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = to_bytes(&sample_set());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(crate::error::Error::Format { .. })));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = to_bytes(&sample_set());
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn oversized_declared_shape_fails_without_allocating() {
        // Header claims a parameter with u32::MAX elements in a tiny buffer.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.push(VERSION);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.push(1);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(crate::error::Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let p = sample_set();
        let dir = std::env::temp_dir().join(format!("cfwt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.cfwt");
        save(&p, &path).unwrap();
        let q = load(&path).unwrap();
        assert_eq!(p, q);
        std::fs::remove_dir_all(&dir).ok();
    }
}
