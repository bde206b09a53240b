//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "TGLC" | u32 version | u64 config-blob length | config JSON |
//!   per tensor: u16 name length | name bytes | u8 rank | u32 per dim |
//!   f32 payload.
//!
//! Save -> load roundtrips are bitwise identical for every parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Result, TglError};
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"TGLC";
const VERSION: u32 = 1;

impl<T: Element> Model<T> {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let blob = serde_json::to_vec(&self.cfg)?;
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(&blob)?;
        for (_, p) in self.store.iter() {
            let name = p.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(TglError::checkpoint(format!(
                    "parameter name too long: {}",
                    p.name
                )));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            let shape = p.value.shape();
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<T>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| {
            TglError::checkpoint(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(TglError::checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut v4 = [0u8; 4];
        read_exact(&mut r, &mut v4, "version")?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(TglError::checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let mut l8 = [0u8; 8];
        read_exact(&mut r, &mut l8, "config length")?;
        let blob_len = u64::from_le_bytes(l8) as usize;
        let mut blob = vec![0u8; blob_len];
        read_exact(&mut r, &mut blob, "config blob")?;
        let cfg: ModelConfig = serde_json::from_slice(&blob)
            .map_err(|e| TglError::checkpoint(format!("bad config blob: {e}")))?;

        let mut model = Model::<T>::init(cfg)?;
        let mut filled = vec![false; model.store.len()];

        loop {
            let mut n2 = [0u8; 2];
            match r.read(&mut n2)? {
                0 => break, // clean EOF at a tensor boundary
                1 => {
                    return Err(TglError::checkpoint(
                        "truncated tensor header".to_string(),
                    ))
                }
                _ => {}
            }
            let name_len = u16::from_le_bytes(n2) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|_| TglError::checkpoint("non-utf8 tensor name".to_string()))?;
            let mut rank = [0u8; 1];
            read_exact(&mut r, &mut rank, "tensor rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d4 = [0u8; 4];
                read_exact(&mut r, &mut d4, "tensor dim")?;
                shape.push(u32::from_le_bytes(d4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * 4];
            read_exact(&mut r, &mut payload, "tensor payload")?;

            let id = model.store.find_by_name(&name).ok_or_else(|| {
                TglError::checkpoint(format!("unknown parameter '{name}' in checkpoint"))
            })?;
            let param = model.store.get_mut(id);
            if param.value.shape() != shape.as_slice() {
                return Err(TglError::checkpoint(format!(
                    "shape mismatch for '{name}': checkpoint {shape:?}, model {:?}",
                    param.value.shape()
                )));
            }
            let data: Vec<T> = payload
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            param.value = Tensor::new(shape, data)?;
            filled[id.0] = true;
        }

        if let Some(missing) = model
            .store
            .iter()
            .find(|(id, _)| !filled[id.0])
            .map(|(_, p)| p.name.clone())
        {
            return Err(TglError::checkpoint(format!(
                "checkpoint missing parameter '{missing}'"
            )));
        }
        Ok(model)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TglError::checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}
