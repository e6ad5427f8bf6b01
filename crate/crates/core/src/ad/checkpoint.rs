//! Binary snapshot container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DBBCKPT1"
//! count      u32
//! per entry:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims u64 × rank
//!   values   f64 × product(dims), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DBBCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Checkpoint(format!("truncated data for '{name}': {e}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::read_from(&mut &b"NOTMAGIC\0\0\0\0"[..]).is_err());
        let mut ck = Checkpoint::default();
        ck.push("w", Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let mut buf = vec![];
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read_from(&mut buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let mut ck = Checkpoint::default();
            ck.push("a", Tensor::matrix(rows, cols, data));
            ck.push("scalar", Tensor::new(vec![1], vec![-0.0]).unwrap());
            let mut buf = vec![];
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.entries().len(), 2);
            for ((n1, t1), (n2, t2)) in ck.entries().iter().zip(back.entries()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
