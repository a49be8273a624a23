//! Binary checkpoint: magic, version, step, resolved config, tensor table.
//!
//! All integers and values are little-endian. Each tensor is stored as
//! name length (u32), UTF-8 name, dtype (u8, 1 = f32, 2 = f64), rank (u32),
//! dims (u32 each) and raw values. Live parameters are stored under their own
//! names, the EMA shadow under `ema.*` and Adam moments under `opt.m.*` and
//! `opt.v.*`.

use std::path::Path;

use eflow_core::backbone::Network;
use eflow_core::objectives::TrainState;
use eflow_core::params::{Adam, ParamStore};
use eflow_core::{Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"EFLOWCK1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Usage(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Usage("checkpoint string is not UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &str) -> Self {
        let mut tensors = Vec::with_capacity(4 * state.params.len());
        for (name, t) in state.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (name, t) in state.ema.iter() {
            tensors.push((format!("ema.{name}"), t.clone()));
        }
        for (prefix, moments) in [("opt.m", &state.adam.m), ("opt.v", &state.adam.v)] {
            for ((name, t), m) in state.params.iter().zip(moments) {
                tensors.push((format!("{prefix}.{name}"), Tensor::new(t.shape().to_vec(), m.clone()).expect("moment shape")));
            }
        }
        Self { step: state.step, config: config.to_string(), tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Usage("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Usage(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => return Err(Error::Usage(format!("tensor `{name}` has unknown dtype {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Usage(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(Self { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the training state for `net`; the first tensor that is
    /// missing, misshapen or unexpected is named in the error.
    pub fn to_state(&self, net: &Network, mut adam: Adam) -> Result<TrainState> {
        let names = net.param_names();
        let mut expected: Vec<String> = names.to_vec();
        expected.extend(names.iter().map(|n| format!("ema.{n}")));
        expected.extend(names.iter().map(|n| format!("opt.m.{n}")));
        expected.extend(names.iter().map(|n| format!("opt.v.{n}")));
        let template = net.init(&mut eflow_core::rng::seeded(0), eflow_core::backbone::Init::Zero);
        for (i, want) in expected.iter().enumerate() {
            let Some((name, t)) = self.tensors.get(i) else {
                return Err(Error::Usage(format!("checkpoint is missing tensor `{want}`")));
            };
            let shape = template.tensor(i % names.len()).shape();
            if name != want || t.shape() != shape {
                return Err(Error::Usage(format!("architecture mismatch at tensor `{name}` (expected `{want}` {shape:?})")));
            }
        }
        if let Some((name, _)) = self.tensors.get(expected.len()) {
            return Err(Error::Usage(format!("architecture mismatch: unexpected tensor `{name}`")));
        }
        let n = names.len();
        let store = |range: std::ops::Range<usize>| -> Result<ParamStore> {
            let mut s = ParamStore::new();
            for (name, (_, t)) in names.iter().zip(&self.tensors[range]) {
                s.insert(name.clone(), t.clone())?;
            }
            Ok(s)
        };
        let params = store(0..n)?;
        let ema = store(n..2 * n)?;
        adam.m = self.tensors[2 * n..3 * n].iter().map(|(_, t)| t.data().to_vec()).collect();
        adam.v = self.tensors[3 * n..4 * n].iter().map(|(_, t)| t.data().to_vec()).collect();
        adam.step = self.step;
        Ok(TrainState { params, ema, adam, step: self.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_reject_corruption() {
        let ck = Checkpoint {
            step: 7,
            config: "train.seed = 1\n".into(),
            tensors: vec![("a".into(), Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        bad = bytes.clone();
        bad.push(0);
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn reads_single_precision_tensors() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.tensors[0].1.data(), &[1.5, -2.0]);
    }
}
