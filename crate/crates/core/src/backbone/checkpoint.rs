//! Checkpoint container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "MSTC" (4 bytes)
//! version u16
//! entry count u32
//! per entry:
//!   name length u16, UTF-8 name
//!   dtype u8 (0 = f64, 1 = f32)
//!   trainable u8
//!   rank u8, then rank × u32 dims
//!   raw little-endian data
//! ```
//!
//! The toolkit computes in f64 and writes dtype 0; f32 entries are widened
//! on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSTC";
pub const VERSION: u16 = 1;

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(store.entries().len())
        .map_err(|_| Error::Format("too many tensors for checkpoint".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for e in store.entries() {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: `{}`", e.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[0u8])?; // dtype f64
        w.write_all(&[u8::from(e.trainable)])?;
        let rank = u8::try_from(e.tensor.rank())
            .map_err(|_| Error::Format("tensor rank exceeds u8".into()))?;
        w.write_all(&[rank])?;
        for &d in e.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format("extent exceeds u32".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {MAGIC:?}",
            magic
        )));
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "entry count")?;
    let count = u32::from_le_bytes(b4) as usize;

    let mut store = ParamStore::new();
    for _ in 0..count {
        read_exact(&mut r, &mut b2, "name length")?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut b1 = [0u8; 1];
        read_exact(&mut r, &mut b1, "dtype")?;
        let dtype = b1[0];
        if dtype > 1 {
            return Err(Error::Format(format!(
                "unknown dtype {dtype} for tensor `{name}`"
            )));
        }
        read_exact(&mut r, &mut b1, "trainable flag")?;
        let trainable = b1[0] != 0;
        read_exact(&mut r, &mut b1, "rank")?;
        let rank = b1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact(&mut r, &mut b4, "dims")?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        if dtype == 0 {
            let mut b8 = [0u8; 8];
            for _ in 0..numel {
                read_exact(&mut r, &mut b8, &format!("data of `{name}`"))?;
                data.push(f64::from_le_bytes(b8));
            }
        } else {
            for _ in 0..numel {
                read_exact(&mut r, &mut b4, &format!("data of `{name}`"))?;
                data.push(f32::from_le_bytes(b4) as f64);
            }
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        store.insert(name, tensor, trainable)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_store() -> ParamStore {
        let mut rng = Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::gaussian(&[3, 4], 1.0, &mut rng), true).unwrap();
        s.insert("a.bias", Tensor::gaussian(&[4], 1.0, &mut rng), false).unwrap();
        s.insert("lambda", Tensor::scalar(0.25), true).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = std::env::temp_dir().join("most_ckpt_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.mstc");
        let store = sample_store();
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(store.entries().len(), loaded.entries().len());
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_structured_error() {
        let dir = std::env::temp_dir().join("most_ckpt_test_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.mstc");
        save(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("most_ckpt_test_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.mstc");
        std::fs::write(&path, b"NOPE____________").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn f32_entries_are_widened() {
        let dir = std::env::temp_dir().join("most_ckpt_test_f32");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.mstc");
        // Hand-written file with one f32 tensor.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(1u16).to_le_bytes());
        bytes.extend_from_slice(b"x");
        bytes.push(1); // f32
        bytes.push(1); // trainable
        bytes.push(1); // rank
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-0.25f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let store = load(&path).unwrap();
        assert_eq!(store.get("x").unwrap().data(), &[1.5, -0.25]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
