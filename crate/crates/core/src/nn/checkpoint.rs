//! Binary checkpoint: `OFCK`, version, JSON network config, then named
//! records of parameters and batch-norm buffers. All integers little-endian.

use std::io::{Read, Write};

use super::config::NetworkConfig;
use super::params::{buffer_specs, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"OFCK";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar, W: Write>(mut w: W, cfg: &NetworkConfig, store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let records: Vec<&(String, Tensor<T>)> = store.params().iter().chain(store.buffers()).collect();
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE as u8);
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, converting stored values to `f32`.
pub fn load_checkpoint<R: Read>(r: R) -> Result<(NetworkConfig, ParamStore<f32>)> {
    let mut rd = Reader { r };
    if rd.bytes(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = rd.u32()? as usize;
    let cfg: NetworkConfig = serde_json::from_slice(&rd.bytes(len)?)?;
    cfg.validate()?;
    let count = rd.u64()?;
    let buffer_names: Vec<String> = buffer_specs(&cfg).into_iter().map(|s| s.name).collect();
    let (mut params, mut buffers) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let n = rd.u32()? as usize;
        let name = String::from_utf8(rd.bytes(n)?).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let dtype = rd.bytes(1)?[0];
        let ndim = rd.u32()? as usize;
        let shape = (0..ndim).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match dtype {
            d if d == DType::F32 as u8 => rd
                .bytes(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            d if d == DType::F64 as u8 => rd
                .bytes(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect(),
            d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
        };
        let t = Tensor::new(shape, data)?;
        if buffer_names.contains(&name) {
            buffers.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    let store = ParamStore::from_parts(params, buffers);
    store.check(&cfg)?;
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::data::toy_config;

    #[test]
    fn round_trip_is_exact() {
        let cfg = toy_config();
        let store = ParamStore::<f32>::init(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &cfg, &store).unwrap();
        assert_eq!(&buf[..4], b"OFCK");
        let (c2, s2) = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2, store);
        assert!(load_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
