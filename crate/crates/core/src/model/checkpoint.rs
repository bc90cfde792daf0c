//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SCALANT\0"
//! version    u32      1
//! n_pairs    u32      config key/value pairs, each two strings
//! n_params   u32
//! per param: name string, ndim u32, dims u64 * ndim, data f64 * prod(dims)
//! string:    u32 byte length + utf-8 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ParameterStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCALANT\0";
pub const VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

pub fn write<W: Write>(store: &ParameterStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let pairs = store.config().to_pairs();
    w.write_all(&(pairs.len() as u32).to_le_bytes())?;
    for (k, v) in &pairs {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(store.params().len() as u32).to_le_bytes())?;
    for p in store.params() {
        write_str(&mut w, &p.name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<ParameterStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let n_pairs = read_u32(&mut r)? as usize;
    let mut pairs = Vec::with_capacity(n_pairs.min(64));
    for _ in 0..n_pairs {
        pairs.push((read_str(&mut r)?, read_str(&mut r)?));
    }
    let config = ModelConfig::from_pairs(&pairs)?;
    let n_params = read_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(Error::format(WHAT, format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format(WHAT, "dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::format(WHAT, format!("{name}: implausible shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::format(WHAT, format!("{name}: {e}")))?;
        named.push((name, value));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    ParameterStore::from_named(config, named)
}

pub fn save(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    read(BufReader::new(file))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format(WHAT, "truncated")
    } else {
        Error::Io(e)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::format(WHAT, format!("string of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::format(WHAT, "invalid utf-8"))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let store = ParameterStore::init(ModelConfig::toy(20), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut buf = Vec::new();
        write(&store, &mut buf).unwrap();
        let back = read(buf.as_slice()).unwrap();
        assert_eq!(back.config(), store.config());
        for (a, b) in store.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let store = ParameterStore::zeros(ModelConfig::toy(20)).unwrap();
        let mut buf = Vec::new();
        write(&store, &mut buf).unwrap();
        assert!(read(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read(bad.as_slice()).is_err());
        assert!(matches!(load("/nonexistent/ckpt.bin"), Err(Error::Missing(_))));
    }
}
