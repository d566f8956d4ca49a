//! The "CNDK" checkpoint container and its JSON sidecar.
//!
//! Little-endian layout: magic `CNDK`, format version u32, tensor count
//! u32, then per tensor: name length u16 + UTF-8 name, dtype tag u8
//! (0 = f32), rank u8, dims u32[rank], raw f32 payload. Parameters
//! serialize value only; optimizer state follows in a parallel section
//! introduced by a distinct section tag byte.

use crate::error::{Error, Result};
use crate::graph::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"CNDK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Section tag for optimizer state following the parameter tensors.
pub const SECTION_OPTIMIZER: u8 = 1;

#[derive(Debug, Default)]
pub struct Container {
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn find(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(DTYPE_F32);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(params: &[(String, Tensor<f32>)], optimizer: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        write_tensor(&mut buf, name, t);
    }
    if !optimizer.is_empty() {
        buf.push(SECTION_OPTIMIZER);
        buf.extend_from_slice(&(optimizer.len() as u32).to_le_bytes());
        for (name, t) in optimizer {
            write_tensor(&mut buf, name, t);
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CorruptData {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn read_tensor(c: &mut Cursor) -> Result<(String, Tensor<f32>)> {
    let name_len = c.u16("tensor name length")? as usize;
    let name_pos = c.pos;
    let name = String::from_utf8(c.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
        Error::CorruptData { offset: name_pos as u64, reason: "tensor name is not UTF-8".into() }
    })?;
    let dtype = c.u8("dtype tag")?;
    if dtype != DTYPE_F32 {
        return Err(Error::CorruptData {
            offset: (c.pos - 1) as u64,
            reason: format!("unknown dtype tag {dtype}"),
        });
    }
    let rank = c.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32("dim")? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = c.take(4 * n, "tensor payload")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::from_vec(shape, data)))
}

pub fn decode(data: &[u8]) -> Result<Container> {
    let mut c = Cursor { data, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptData { offset: 0, reason: "bad magic, expected CNDK".into() });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::CorruptData {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Container::default();
    for _ in 0..count {
        out.params.push(read_tensor(&mut c)?);
    }
    while c.pos < data.len() {
        let tag = c.u8("section tag")?;
        if tag != SECTION_OPTIMIZER {
            return Err(Error::CorruptData {
                offset: (c.pos - 1) as u64,
                reason: format!("unknown section tag {tag}"),
            });
        }
        let count = c.u32("section tensor count")? as usize;
        for _ in 0..count {
            out.optimizer.push(read_tensor(&mut c)?);
        }
    }
    Ok(out)
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)], optimizer: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, optimizer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    decode(&data)
}

/// Parameter values (no gradients) as named f32 tensors in store order.
pub fn params_to_tensors<T: Scalar>(params: &Params<T>) -> Vec<(String, Tensor<f32>)> {
    params.iter().map(|(_, p)| (p.name.clone(), p.value.to_f32())).collect()
}

/// Overwrite parameter values from a loaded container, matching by name.
pub fn load_params<T: Scalar>(params: &mut Params<T>, container: &Container) -> Result<()> {
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.get(id).name.clone();
        let t = container.find(&name)?;
        if t.shape() != params.get(id).value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                params.get(id).value.shape()
            )));
        }
        params.get_mut(id).value = Tensor::from_f32(t);
    }
    Ok(())
}

pub fn tensors_from_f32<T: Scalar>(ts: &[(String, Tensor<f32>)]) -> Vec<(String, Tensor<T>)> {
    ts.iter().map(|(n, t)| (n.clone(), Tensor::from_f32(t))).collect()
}

pub fn tensors_to_f32<T: Scalar>(ts: &[(String, Tensor<T>)]) -> Vec<(String, Tensor<f32>)> {
    ts.iter().map(|(n, t)| (n.clone(), t.to_f32())).collect()
}

/// Mode flags recorded alongside every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeFlags {
    pub multi_res: bool,
}

/// JSON sidecar written next to each container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub metrics: serde_json::Value,
    pub mode: ModeFlags,
    pub arch: serde_json::Value,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save_sidecar(ckpt: &Path, sidecar: &Sidecar) -> Result<()> {
    let f = std::fs::File::create(sidecar_path(ckpt))?;
    serde_json::to_writer_pretty(f, sidecar)?;
    Ok(())
}

pub fn load_sidecar(ckpt: &Path) -> Result<Sidecar> {
    let f = std::fs::File::open(sidecar_path(ckpt))?;
    Ok(serde_json::from_reader(f)?)
}
