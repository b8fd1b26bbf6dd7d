//! `G4GCKPT1` parameter files: magic, then per tensor a little-endian u32
//! name length, the name bytes, u32 rank, u32 extents and row-major f32 data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 8] = b"G4GCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(sets: &[&ParamSet]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for set in sets {
        for (name, t) in set.iter() {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend((v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn save(path: impl AsRef<Path>, sets: &[&ParamSet]) -> Result<()> {
    fs::write(path, encode(sets))?;
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Record>> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing G4GCKPT1 magic"));
    }
    let mut pos = MAGIC.len();
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let mut out = BTreeMap::new();
    while pos < bytes.len() {
        let len = u32_at(&mut pos)? as usize;
        let name = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        pos += len;
        let rank = u32_at(&mut pos)? as usize;
        let shape = (0..rank).map(|_| u32_at(&mut pos).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
        pos += 4 * n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if out.insert(name.clone(), Record { shape, data }).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Record>> {
    decode(&fs::read(path)?)
}

/// Copies every tensor of `params` from the checkpoint, checking shapes.
pub fn restore(params: &mut ParamSet, records: &BTreeMap<String, Record>) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let rec = records.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        let shape = params.get(&name)?.shape().to_vec();
        if rec.shape != shape {
            return Err(Error::ShapeMismatch { op: "checkpoint restore", lhs: shape, rhs: rec.shape.clone() });
        }
        params.set_values(&name, rec.data.iter().map(|&v| v as f64).collect())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let mut p = ParamSet::new();
        p.insert("a.w", vec![0.5, -1.25, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        p.insert("b", vec![7.0], &[1]).unwrap();
        let bytes = encode(&[&p]);
        assert_eq!(&bytes[..8], MAGIC);
        let recs = decode(&bytes).unwrap();
        assert_eq!(recs["a.w"].shape, vec![2, 3]);
        let mut q = ParamSet::new();
        q.insert("a.w", vec![0.0; 6], &[2, 3]).unwrap();
        q.insert("b", vec![0.0], &[1]).unwrap();
        restore(&mut q, &recs).unwrap();
        assert_eq!(q.get("a.w").unwrap().data(), p.get("a.w").unwrap().data());

        assert!(decode(b"NOTACKPT").is_err());
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        let mut wrong = ParamSet::new();
        wrong.insert("a.w", vec![0.0; 6], &[3, 2]).unwrap();
        assert!(restore(&mut wrong, &recs).is_err());
    }
}
