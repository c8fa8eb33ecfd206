//! Versioned binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MELADAPT"
//! version      u32
//! manifest     u32 length + UTF-8 text, one `key=value` per line
//! count        u32
//! entries      count x { name: u16 len + bytes, kind: u8 len + bytes,
//!                        trainable: u8, ndim: u8, dims: ndim x u32 }
//! data         each tensor's f32 values, row-major, in entry order
//! checksum     u64 FNV-1a over every preceding byte
//! ```

use std::io::{Read, Write};

use super::params::Fnv64;
use super::{NnError, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"MELADAPT";
pub const FORMAT_VERSION: u32 = 1;

/// One tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    /// Kind of the layer that owns the tensor.
    pub kind: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub manifest: Vec<(String, String)>,
    pub records: Vec<TensorRecord>,
}

impl WeightFile {
    pub fn manifest_value(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptWeights(msg.into())
}

pub fn encode(file: &WeightFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut manifest = String::new();
    for (k, v) in &file.manifest {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(NnError::InvalidLayer(format!("manifest entry {k:?} is not encodable")));
        }
        manifest.push_str(&format!("{k}={v}\n"));
    }
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(file.records.len() as u32).to_le_bytes());
    for r in &file.records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.kind.len() as u8);
        out.extend_from_slice(r.kind.as_bytes());
        out.push(r.trainable as u8);
        out.push(r.tensor.shape.len() as u8);
        for &d in &r.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for r in &file.records {
        for v in &r.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = Fnv64::new();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    Ok(out)
}

pub fn write(mut w: impl Write, file: &WeightFile) -> Result<()> {
    w.write_all(&encode(file)?).map_err(NnError::Io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightFile> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv64::new();
    h.write(body);
    if h.finish() != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    let mut c = Cursor { bytes: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(NnError::ManifestMismatch(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mlen = c.u32()? as usize;
    let text = c.string(mlen)?;
    let manifest = text
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| corrupt(format!("bad manifest line {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = c.u32()? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = c.string(nlen)?;
        let klen = c.u8()? as usize;
        let kind = c.string(klen)?;
        let trainable = c.u8()? != 0;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, kind, trainable, shape));
    }
    let mut records = Vec::with_capacity(count);
    for (name, kind, trainable, shape) in headers {
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(TensorRecord {
            name,
            kind,
            trainable,
            tensor: Tensor { shape, data },
        });
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(WeightFile { manifest, records })
}

pub fn read(mut r: impl Read) -> Result<WeightFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(NnError::Io)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        WeightFile {
            manifest: vec![("arch".into(), "desk".into())],
            records: vec![TensorRecord {
                name: "d.weight".into(),
                kind: "dense_per_frame".into(),
                trainable: true,
                tensor: Tensor::new(vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25]),
            }],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(NnError::CorruptWeights(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode(&flipped), Err(NnError::CorruptWeights(_))));
        assert!(matches!(decode(b"garbage!garbage!"), Err(NnError::CorruptWeights(_))));
    }
}
