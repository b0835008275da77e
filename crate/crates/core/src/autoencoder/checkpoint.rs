//! Versioned binary model container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, length-prefixed
//! JSON config, `u32` tensor count followed by named tensors (name, rank,
//! `u64` dims, `f64` data), then an optional normalization block.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{AEConfig, Autoencoder};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ingest::NormalizationStats;

pub const MAGIC: &[u8; 8] = b"FRULEAE\0";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

pub fn write_model<W: Write>(model: &Autoencoder, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION)?;
    put_str(&mut w, &serde_json::to_string(model.config())?)?;
    let tensors = model.named_tensors();
    put_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        put_str(&mut w, &name)?;
        put_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    match model.normalization() {
        None => w.write_all(&[0])?,
        Some(s) => {
            w.write_all(&[1])?;
            put_u32(&mut w, s.n_channels() as u32)?;
            for c in 0..s.n_channels() {
                put_str(&mut w, &s.channels[c])?;
                w.write_all(&s.mean[c].to_bits().to_le_bytes())?;
                w.write_all(&s.std[c].to_bits().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<Autoencoder> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = get_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config: AEConfig = serde_json::from_str(&get_str(&mut r)?)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
    let mut model = Autoencoder::init(config)?;

    let n = get_u32(&mut r)? as usize;
    let mut stored: HashMap<String, Tensor> = HashMap::with_capacity(n);
    for _ in 0..n {
        let name = get_str(&mut r)?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| get_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        stored.insert(name, Tensor::new(shape, data)?);
    }

    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != stored.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture needs {}",
            stored.len(),
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(truncated)?;
    if flag[0] == 1 {
        let c = get_u32(&mut r)? as usize;
        let mut stats = NormalizationStats {
            channels: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for _ in 0..c {
            stats.channels.push(get_str(&mut r)?);
            stats.mean.push(get_f64(&mut r)?);
            stats.std.push(get_f64(&mut r)?);
        }
        model
            .set_normalization(stats)
            .map_err(|e| Error::Format(format!("normalization block: {e}")))?;
    }
    Ok(model)
}

pub fn save_model(model: &Autoencoder, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Autoencoder> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Autoencoder {
        let cfg = AEConfig {
            hidden_channels: 3,
            latent_channels: 2,
            seed: 5,
            ..AEConfig::new(2, 8).with_blocks(2)
        };
        let mut m = Autoencoder::init(cfg).unwrap();
        m.set_normalization(NormalizationStats {
            channels: vec!["a".into(), "b".into()],
            mean: vec![0.1, 2.0 / 3.0],
            std: vec![1e-3, 0.0],
        })
        .unwrap();
        m
    }

    #[test]
    fn round_trip_forward_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let x = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(
            back.forward_eval(&x).unwrap().reconstruction,
            m.forward_eval(&x).unwrap().reconstruction
        );
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] ^= 0xff;
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_model(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(
            read_model(&buf[..buf.len() / 2]),
            Err(Error::Format(_))
        ));
    }
}
