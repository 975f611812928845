//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!   magic   8 bytes  "EGOPOSE\0"
//!   version u32      currently 1
//!   dtype   u8       4 = f32, 8 = f64
//!   meta    u32 count, then per entry: u16 key len, key utf8,
//!                                      u32 value len, value utf8
//!   tensors u32 count, then per tensor: u16 name len, name utf8,
//!                                       u8 trainable flag, u8 rank,
//!                                       u32 dims[rank], raw LE values
//! Tensors are written in name order, so serialization is byte-stable and
//! round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 8] = b"EGOPOSE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

pub fn write_checkpoint<E: Element>(
    path: &Path,
    params: &ParamStore<E>,
    meta: &Metadata,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_checkpoint_to(&mut w, params, meta)
}

pub fn write_checkpoint_to<E: Element, W: Write>(
    w: &mut W,
    params: &ParamStore<E>,
    meta: &Metadata,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[E::DTYPE.byte_width() as u8])?;

    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (k, v) in meta {
        w.write_all(&(k.len() as u16).to_le_bytes())?;
        w.write_all(k.as_bytes())?;
        w.write_all(&(v.len() as u32).to_le_bytes())?;
        w.write_all(v.as_bytes())?;
    }

    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, entry) in params.iter() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[entry.trainable as u8])?;
        w.write_all(&[entry.tensor.shape().len() as u8])?;
        for &d in entry.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(entry.tensor.numel() * E::DTYPE.byte_width());
        for &v in entry.tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<E: Element>(path: &Path) -> Result<(ParamStore<E>, Metadata)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_checkpoint_from(&mut r)
}

pub fn read_checkpoint_from<E: Element, R: Read>(r: &mut R) -> Result<(ParamStore<E>, Metadata)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Version("not a parameter checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let width = read_u8(r)? as usize;
    if width != E::DTYPE.byte_width() {
        return Err(Error::Version(format!(
            "checkpoint holds {width}-byte values, reader expects {}",
            E::DTYPE.byte_width()
        )));
    }

    let mut meta = Metadata::new();
    let meta_count = read_u32(r)?;
    for _ in 0..meta_count {
        let klen = read_u16(r)? as usize;
        let key = read_string(r, klen)?;
        let vlen = read_u32(r)? as usize;
        let value = read_string(r, vlen)?;
        meta.insert(key, value);
    }

    let mut params = ParamStore::new();
    let tensor_count = read_u32(r)?;
    for _ in 0..tensor_count {
        let nlen = read_u16(r)? as usize;
        let name = read_string(r, nlen)?;
        let trainable = read_u8(r)? != 0;
        let rank = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * width];
        r.read_exact(&mut buf)?;
        let data: Vec<E> = buf.chunks_exact(width).map(E::read_le).collect();
        let tensor = Tensor::new(shape, data)?;
        if trainable {
            params.insert(&name, tensor);
        } else {
            params.insert_frozen(&name, tensor);
        }
    }
    Ok((params, meta))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Version("non-utf8 string in checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut params = ParamStore::<f32>::new();
        params.insert(
            "net.w1",
            Tensor::from_f64_slice(&[2, 3], &[0.1, -0.25, 3.5e-7, 1.0, -0.0, 42.0]).unwrap(),
        );
        params.insert_frozen("net.bn.running_mean", Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let mut meta = Metadata::new();
        meta.insert("stage".into(), "lifter".into());
        meta.insert("dual_branch".into(), "true".into());

        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &params, &meta).unwrap();
        let (back, meta2) = read_checkpoint_from::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.len(), 2);
        for (name, entry) in params.iter() {
            let restored = back.get(name).unwrap();
            assert_eq!(restored.shape(), entry.tensor.shape());
            for (a, b) in restored.data().iter().zip(entry.tensor.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // And the bytes themselves are stable.
        let mut buf2 = Vec::new();
        write_checkpoint_to(&mut buf2, &back, &meta2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn dtype_mismatch_is_a_version_error() {
        let params = ParamStore::<f32>::new();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &params, &Metadata::new()).unwrap();
        let err = read_checkpoint_from::<f64, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Version(_)));
    }

    #[test]
    fn garbage_is_rejected() {
        let bytes = b"definitely not a checkpoint";
        let err = read_checkpoint_from::<f32, _>(&mut &bytes[..]).unwrap_err();
        assert!(matches!(err, Error::Version(_)));
    }
}
