//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   6 bytes  "GCNCPT"
//! version 1 byte   currently 1
//! count   u32      number of entries
//! entry:  u32 name length, name bytes (UTF-8),
//!         4 x u32 dims (batch, channels, height, width),
//!         numel x f32 values
//! ```
//!
//! Values are stored as 32-bit floats regardless of the compute element type.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Shape4, Tensor4};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"GCNCPT";
const VERSION: u8 = 1;

pub fn save<E: Element>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        for d in p.value.shape().dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let shape = Shape4::from_dims(dims);
        let mut data = Vec::with_capacity(shape.numel());
        let mut buf = [0u8; 4];
        for _ in 0..shape.numel() {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor4::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Load a checkpoint into an existing store. The name sets and shapes must
/// match exactly.
pub fn load_into<E: Element>(store: &mut ParamStore<E>, path: &Path) -> Result<()> {
    let entries = read_entries(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, tensor) in entries {
        let id = store.id_of(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {name} unknown to the model"))
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {} does not match model shape {}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, tensor.cast::<E>())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store
            .add("a.w", Tensor4::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5]).unwrap())
            .unwrap();
        store
            .add("b.scale", Tensor4::scalar(0.125))
            .unwrap();
        save(&store, &path).unwrap();

        let mut other = ParamStore::<f32>::new();
        other
            .add("a.w", Tensor4::zeros(Shape4::matrix(2, 3)))
            .unwrap();
        other.add("b.scale", Tensor4::scalar(0.0)).unwrap();
        load_into(&mut other, &path).unwrap();
        assert_eq!(
            other.value(other.id_of("a.w").unwrap()).data(),
            &[1.0, -2.0, 3.5, 0.0, 4.25, -0.5]
        );
        assert_eq!(other.value(other.id_of("b.scale").unwrap()).data(), &[0.125]);
    }

    #[test]
    fn rejects_mismatched_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor4::scalar(1.0)).unwrap();
        save(&store, &path).unwrap();

        let mut wrong_name = ParamStore::<f32>::new();
        wrong_name.add("v", Tensor4::scalar(0.0)).unwrap();
        assert!(load_into(&mut wrong_name, &path).is_err());

        let mut wrong_shape = ParamStore::<f32>::new();
        wrong_shape
            .add("w", Tensor4::zeros(Shape4::matrix(1, 2)))
            .unwrap();
        assert!(load_into(&mut wrong_shape, &path).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(read_entries(&path).is_err());
    }
}
