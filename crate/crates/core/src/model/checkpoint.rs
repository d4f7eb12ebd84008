//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CPGTTSCK"
//! version      u32      FORMAT_VERSION
//! crate        u32 len + UTF-8   crate version that wrote the file
//! config       u32 len + UTF-8   model configuration as TOML
//! extra        u32 len + UTF-8   caller TOML (training config, loop state)
//! params       tensor section
//! bn           u32 sites, then per site u32 sets, then per set:
//!              u8 initialized, u32 channels, channels × f64 mean, channels × f64 var
//! aux          tensor section (optimizer moments)
//! crc32        u32 over every preceding byte
//! ```
//!
//! A tensor section is a u32 count followed by, per tensor: u32 name length,
//! name, u8 rank, rank × u64 dims, then the values as f64 bit patterns.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::nn::BatchNormStats;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CPGTTSCK";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus whatever the caller needs to resume: free-form TOML and named
/// auxiliary tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: String,
    pub aux: Vec<(String, Tensor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }

    fn tensors<'a>(&mut self, items: impl Iterator<Item = (&'a str, &'a Tensor)>) {
        let items: Vec<_> = items.collect();
        self.u32(items.len());
        for (name, t) in items {
            self.str(name);
            self.0.push(u8::try_from(t.ndim()).expect("tensor rank exceeds u8"));
            for &d in t.shape() {
                self.0.extend_from_slice(&(d as u64).to_le_bytes());
            }
            self.f64s(t.data());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: start as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32(what)?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.str("tensor name")?;
            let rank = self.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = self.u64("tensor dim")?;
                shape.push(usize::try_from(d).map_err(|_| self.err("tensor dim too large"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| self.err(format!("tensor `{name}` size overflows")))?;
            let data = self.f64s(n, "tensor data")?;
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            extra: String::new(),
            aux: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.str(env!("CARGO_PKG_VERSION"));
        w.str(&toml::to_string(&self.model.config).expect("model config serializes"));
        w.str(&self.extra);
        w.tensors(self.model.params.iter());
        w.u32(self.model.bn.len());
        for site in &self.model.bn {
            w.u32(site.len());
            for st in site {
                w.0.push(st.initialized as u8);
                w.u32(st.channels());
                w.f64s(&st.mean);
                w.f64s(&st.var);
            }
        }
        w.tensors(self.aux.iter().map(|(n, t)| (n.as_str(), t)));
        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("file of {} bytes is too short for a checkpoint", bytes.len()),
            });
        }
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic; not a checkpoint".into(),
            });
        }
        let version = r.u32("version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"),
            });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..body_end]);
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 12,
        };
        let _writer_version = r.str("crate version")?;
        let config_pos = r.pos;
        let config_text = r.str("model config")?;
        let config: ModelConfig = toml::from_str(&config_text).map_err(|e| Error::Parse {
            offset: config_pos as u64,
            msg: format!("model config echo does not match this build: {e}"),
        })?;
        let extra = r.str("extra section")?;
        let params_pos = r.pos;
        let params = r.tensors("parameter section")?;
        let sites = r.u32("batch-norm site count")?;
        let mut bn = Vec::with_capacity(sites.min(1024));
        for _ in 0..sites {
            let sets = r.u32("batch-norm set count")?;
            let mut row = Vec::with_capacity(sets.min(1024));
            for _ in 0..sets {
                let initialized = match r.u8("batch-norm flag")? {
                    0 => false,
                    1 => true,
                    other => return Err(r.err(format!("batch-norm flag {other} is not 0 or 1"))),
                };
                let c = r.u32("batch-norm channels")?;
                let mean = r.f64s(c, "batch-norm mean")?;
                let var = r.f64s(c, "batch-norm variance")?;
                row.push(BatchNormStats { mean, var, initialized });
            }
            bn.push(row);
        }
        let aux = r.tensors("auxiliary section")?;
        if r.pos != body_end {
            return Err(r.err(format!("{} unexpected trailing bytes", body_end - r.pos)));
        }
        if stored != actual {
            return Err(Error::Parse {
                offset: body_end as u64,
                msg: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        let mut map = HashMap::with_capacity(params.len());
        for (name, t) in params {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Parse {
                    offset: params_pos as u64,
                    msg: format!("duplicate parameter `{name}`"),
                });
            }
        }
        let model = Model::from_tensors(config, map, bn)?;
        Ok(Checkpoint { model, extra, aux })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check::{randomize_bn_stats, tiny_config};
    use crate::model::Variant;

    fn sample() -> Checkpoint {
        let mut model = Model::new(tiny_config(Variant::Gen), 3).unwrap();
        randomize_bn_stats(&mut model, 3);
        Checkpoint {
            model,
            extra: "step = 12\n".into(),
            aux: vec![("adam.m.embedding".into(), Tensor::full(&[5, 4], -0.0))],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.aux[0].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_and_corruption_give_offsets() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 13, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let ck = sample();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.str("0.0.0");
        w.str("bogus_field = 3\n");
        w.str("");
        w.tensors(ck.model.params.iter());
        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&w.0).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
    }
}
