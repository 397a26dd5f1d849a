//! Binary weight files.
//!
//! Layout (little-endian): `b"ENDO"`, u32 version, u64 architecture hash,
//! u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
//! u32 dims, f32 values. Optimizer moments are stored as tensors named
//! `adam.m.<param>` / `adam.v.<param>`. A trailer holds the u64 optimizer
//! step followed by the u32-length-prefixed JSON network config.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::Adam;
use super::model::{Model, Param, UNetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ENDO";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut impl Write, v: u32) -> Result<()> {
    Ok(out.write_all(&v.to_le_bytes())?)
}

fn get_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_tensor(out: &mut impl Write, name: &str, dims: &[usize], values: &[f32]) -> Result<()> {
    put_u32(out, name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    put_u32(out, dims.len() as u32)?;
    for &d in dims {
        put_u32(out, d as u32)?;
    }
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_tensor(input: &mut impl Read) -> Result<Param<f32>> {
    let len = get_u32(input)? as usize;
    if len > 4096 {
        return Err(Error::Weights(format!("tensor name length {len} is implausible")));
    }
    let mut name = vec![0u8; len];
    input.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Weights("tensor name is not utf-8".into()))?;
    let rank = get_u32(input)? as usize;
    if rank > 8 {
        return Err(Error::Weights(format!("tensor {name} has rank {rank}")));
    }
    let dims = (0..rank).map(|_| get_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes)?;
    let value = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Param { name, dims, value })
}

pub fn write_weights(out: &mut impl Write, model: &Model<f32>, adam: Option<&Adam<f32>>) -> Result<()> {
    let params = model.params();
    let count = params.len() * if adam.is_some() { 3 } else { 1 };
    out.write_all(MAGIC)?;
    put_u32(out, FORMAT_VERSION)?;
    out.write_all(&model.config().architecture_hash().to_le_bytes())?;
    put_u32(out, count as u32)?;
    for p in params {
        put_tensor(out, &p.name, &p.dims, &p.value)?;
    }
    if let Some(adam) = adam {
        for (p, m) in params.iter().zip(&adam.m) {
            put_tensor(out, &format!("adam.m.{}", p.name), &p.dims, m)?;
        }
        for (p, v) in params.iter().zip(&adam.v) {
            put_tensor(out, &format!("adam.v.{}", p.name), &p.dims, v)?;
        }
    }
    out.write_all(&adam.map_or(0, |a| a.step).to_le_bytes())?;
    let config = serde_json::to_vec(model.config())?;
    put_u32(out, config.len() as u32)?;
    out.write_all(&config)?;
    Ok(())
}

/// Everything stored in a weight file.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub architecture_hash: u64,
    pub tensors: Vec<Param<f32>>,
    pub adam_step: u64,
    pub config: UNetConfig,
}

pub fn read_weights(input: &mut impl Read) -> Result<WeightFile> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Weights("bad magic".into()));
    }
    let version = get_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Weights(format!("unsupported format version {version}")));
    }
    let architecture_hash = get_u64(input)?;
    let count = get_u32(input)? as usize;
    let tensors = (0..count).map(|_| get_tensor(input)).collect::<Result<Vec<_>>>()?;
    let adam_step = get_u64(input)?;
    let len = get_u32(input)? as usize;
    let mut config = vec![0u8; len];
    input.read_exact(&mut config)?;
    let config: UNetConfig = serde_json::from_slice(&config)?;
    if config.architecture_hash() != architecture_hash {
        return Err(Error::Weights("embedded config does not match the header hash".into()));
    }
    Ok(WeightFile { architecture_hash, tensors, adam_step, config })
}

/// Copies stored tensors into `model` (and `adam` when given); the file must
/// describe the same architecture.
pub fn apply_weights(file: &WeightFile, model: &mut Model<f32>, adam: Option<&mut Adam<f32>>) -> Result<()> {
    let expected = model.config().architecture_hash();
    if file.architecture_hash != expected {
        return Err(Error::Weights(format!(
            "architecture mismatch: file {:016x}, model {expected:016x}",
            file.architecture_hash
        )));
    }
    let find = |name: &str| file.tensors.iter().find(|t| t.name == name);
    let mut loaded = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let t = find(&p.name).ok_or_else(|| Error::Weights(format!("missing tensor {}", p.name)))?;
        if t.dims != p.dims {
            return Err(Error::Weights(format!("tensor {} has dims {:?}, expected {:?}", p.name, t.dims, p.dims)));
        }
        loaded.push(t.value.clone());
    }
    if let Some(adam) = adam {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.params() {
            let tm = find(&format!("adam.m.{}", p.name)).ok_or_else(|| Error::Weights(format!("missing optimizer state for {}", p.name)))?;
            let tv = find(&format!("adam.v.{}", p.name)).ok_or_else(|| Error::Weights(format!("missing optimizer state for {}", p.name)))?;
            if tm.dims != p.dims || tv.dims != p.dims {
                return Err(Error::Weights(format!("optimizer state for {} has wrong dims", p.name)));
            }
            m.push(tm.value.clone());
            v.push(tv.value.clone());
        }
        adam.m = m;
        adam.v = v;
        adam.step = file.adam_step;
    }
    for (p, values) in model.params_mut().iter_mut().zip(loaded) {
        p.value = values;
    }
    Ok(())
}

pub fn save_weights(path: impl AsRef<Path>, model: &Model<f32>, adam: Option<&Adam<f32>>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights(&mut out, model, adam)?;
    out.flush()?;
    Ok(())
}

/// Loads into an existing model of the expected architecture.
pub fn load_weights(path: impl AsRef<Path>, model: &mut Model<f32>, adam: Option<&mut Adam<f32>>) -> Result<()> {
    let path = path.as_ref();
    let file = read_weights(&mut std::io::BufReader::new(std::fs::File::open(path)?)).map_err(|e| e.at_path(path))?;
    apply_weights(&file, model, adam)
}

/// Builds the model described by the file's embedded config.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let file = read_weights(&mut std::io::BufReader::new(std::fs::File::open(path)?)).map_err(|e| e.at_path(path))?;
    let mut model = Model::build(&file.config)?;
    apply_weights(&file, &mut model, None)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::Tensor4;

    fn tiny() -> UNetConfig {
        UNetConfig { levels: 2, base_channels: 2, seed: 3, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = Model::<f32>::build(&tiny()).unwrap();
        let mut adam = Adam::new(1e-3, model.params());
        adam.step = 7;
        adam.m[0][0] = 0.5;
        let mut buf = Vec::new();
        write_weights(&mut buf, &model, Some(&adam)).unwrap();
        let file = read_weights(&mut &buf[..]).unwrap();
        let mut other = Model::<f32>::build(&UNetConfig { seed: 99, ..tiny() }).unwrap();
        let mut adam2 = Adam::new(1e-3, other.params());
        apply_weights(&file, &mut other, Some(&mut adam2)).unwrap();
        assert_eq!(other.params(), model.params());
        assert_eq!(adam2, adam);
        let x = Tensor4::from_vec(1, 1, 8, 8, (0..64).map(|v| (v as f32).sin()).collect()).unwrap();
        assert_eq!(model.forward(&x).unwrap(), other.forward(&x).unwrap());
    }

    #[test]
    fn wrong_architecture_and_magic() {
        let model = Model::<f32>::build(&tiny()).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &model, None).unwrap();
        let file = read_weights(&mut &buf[..]).unwrap();
        let mut deeper = Model::<f32>::build(&UNetConfig { levels: 3, ..tiny() }).unwrap();
        assert!(matches!(apply_weights(&file, &mut deeper, None), Err(Error::Weights(_))));
        buf[0] = b'X';
        assert!(matches!(read_weights(&mut &buf[..]), Err(Error::Weights(_))));
    }
}
