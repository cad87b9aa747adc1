//! Binary checkpoint format.
//!
//! ```text
//! "FXDR" | version u32 | config_len u32 | config JSON (UTF-8)
//! tensor_count u32
//! per tensor: name_len u32 | name | rank u8 | dims u32 × rank | f64 × Π dims
//! ```
//! All integers and floats little-endian; payloads row-major.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::weights::{DraftWeights, FrozenWeights};
use super::Transformer;

pub const MAGIC: &[u8; 4] = b"FXDR";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<S: Scalar>(model: &Transformer<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let mut tensors = model.frozen.tensors();
    tensors.extend(model.draft.tensors());
    put_u32(&mut out, tensors.len() as u32);
    for (name, shape, data) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &dim in &shape {
            put_u32(&mut out, dim as u32);
        }
        for x in data {
            out.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Transformer<S>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let mut fill = |name: &str, shape: &[usize], dst: &mut [S], err: &mut Option<Error>| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some((s, data)) if s == shape => {
                for (d, x) in dst.iter_mut().zip(data) {
                    *d = S::of(x);
                }
            }
            Some((s, _)) => *err = Some(Error::Checkpoint(format!("{name}: shape {s:?}, expected {shape:?}"))),
            None => *err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    };
    let mut err = None;
    let mut frozen = FrozenWeights::<S>::zeros(&config);
    frozen.visit_mut(|n, s, d| fill(n, s, d, &mut err));
    let mut draft = DraftWeights::<S>::zeros(&config);
    draft.visit_mut(|n, s, d| fill(n, s, d, &mut err));
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Transformer::new(config, frozen, draft)
}

pub fn save<S: Scalar>(model: &Transformer<S>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Transformer<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Transformer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Transformer::random(ModelConfig::tiny(8, 2, 1, 3), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"FXDR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back: Transformer<f64> = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn loads_into_f32() {
        let m = tiny();
        let back: Transformer<f32> = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.frozen.head.get(1, 2), m.frozen.head.get(1, 2) as f32);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let m = tiny();
        let bytes = encode(&m).unwrap();
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg: ModelConfig = serde_json::from_slice(&bytes[12..12 + cfg_len]).unwrap();
        assert_eq!(cfg, m.config);
        let at = 12 + cfg_len;
        let count = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        assert_eq!(count, m.frozen.tensors().len() + m.draft.tensors().len());
        let name_len = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
        assert_eq!(&bytes[at + 8..at + 8 + name_len], b"embed");
        let p = at + 8 + name_len;
        assert_eq!(bytes[p], 2);
        assert_eq!(u32::from_le_bytes(bytes[p + 1..p + 5].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[p + 5..p + 9].try_into().unwrap()), 16);
        let first = f64::from_le_bytes(bytes[p + 9..p + 17].try_into().unwrap());
        assert_eq!(first, m.frozen.embed.get(0, 0));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode::<f64>(&version).is_err());
    }
}
