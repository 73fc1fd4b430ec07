//! Binary checkpoint format.
//!
//! ```text
//! magic        5 bytes   "UVET1"
//! count        u32 LE    number of table entries
//! table        count × { name_len u32, name utf-8, dtype_len u8, dtype ascii ("f64"),
//!                        ndim u32, dims ndim × u64 }
//! payloads     for each entry in table order: numel × f64 LE
//! ```
//!
//! The first entry is always `config`, an 8-element vector holding
//! `[image_size, patch_size, channels, num_layers, hidden_dim, num_heads,
//! mlp_ratio, include_cls]`; the remaining entries are the encoder weights
//! under the names of [`EncoderParams::named_tensors`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderParams};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UVET1";
const DTYPE: &str = "f64";
const CONFIG_ENTRY: &str = "config";

fn config_tensor(config: &EncoderConfig) -> Result<Tensor> {
    Tensor::new(
        vec![8],
        vec![
            config.image_size as f64,
            config.patch_size as f64,
            config.channels as f64,
            config.num_layers as f64,
            config.hidden_dim as f64,
            config.num_heads as f64,
            config.mlp_ratio,
            if config.include_cls { 1.0 } else { 0.0 },
        ],
    )
}

fn config_from_tensor(t: &Tensor) -> Result<EncoderConfig> {
    let v = t.data();
    if v.len() != 8 {
        bail!(Format, "config entry must hold 8 values, got {}", v.len());
    }
    let count = |x: f64, what: &str| -> Result<usize> {
        if x < 0.0 || x.fract() != 0.0 {
            bail!(Format, "config field {what} is not a count: {x}");
        }
        Ok(x as usize)
    };
    let config = EncoderConfig {
        image_size: count(v[0], "image_size")?,
        patch_size: count(v[1], "patch_size")?,
        channels: count(v[2], "channels")?,
        num_layers: count(v[3], "num_layers")?,
        hidden_dim: count(v[4], "hidden_dim")?,
        num_heads: count(v[5], "num_heads")?,
        mlp_ratio: v[6],
        include_cls: v[7] != 0.0,
    };
    config.validate().map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
    Ok(config)
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let cfg = config_tensor(config)?;
    let mut entries: Vec<(String, &Tensor)> = vec![(CONFIG_ENTRY.to_string(), &cfg)];
    entries.extend(params.named_tensors());

    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE.len() as u8])?;
        w.write_all(DTYPE.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
    }
    for (_, t) in &entries {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderConfig, EncoderParams)> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        bail!(Format, "bad magic {:?}, expected {:?}", String::from_utf8_lossy(&magic), "UVET1");
    }
    let count = read_u32(&mut r, "entry count")? as usize;
    if count > 1 << 20 {
        bail!(Format, "implausible entry count {count}");
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 4096 {
            bail!(Format, "implausible name length {name_len}");
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let mut dlen = [0u8; 1];
        read_exact(&mut r, &mut dlen, "dtype length")?;
        let mut dtype = vec![0u8; dlen[0] as usize];
        read_exact(&mut r, &mut dtype, "dtype")?;
        if dtype != DTYPE.as_bytes() {
            bail!(Format, "tensor {name:?} has unsupported dtype {:?}", String::from_utf8_lossy(&dtype));
        }
        let ndim = read_u32(&mut r, "ndim")? as usize;
        if ndim == 0 || ndim > 8 {
            bail!(Format, "tensor {name:?} has unsupported rank {ndim}");
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        table.push((name, shape));
    }
    let mut tensors = HashMap::with_capacity(count);
    for (name, shape) in table {
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            bail!(Format, "tensor {name:?} is implausibly large");
        }
        let mut bytes = vec![0u8; numel * 8];
        read_exact(&mut r, &mut bytes, &name)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        tensors.insert(name, t);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        bail!(Format, "trailing bytes after the last payload");
    }
    let Some(cfg) = tensors.remove(CONFIG_ENTRY) else { bail!(Format, "checkpoint has no config entry") };
    let config = config_from_tensor(&cfg)?;
    let params = EncoderParams::from_named(&config, |n| tensors.remove(n))?;
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        bail!(Format, "unexpected tensors in checkpoint: {extra:?}");
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), config, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderConfig, EncoderParams)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
