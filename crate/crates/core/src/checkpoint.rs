//! `DLCK` checkpoint files: parameters, optimizer moments, RNG streams and
//! the step counter, bit-exact on round trip.
//!
//! Layout (little-endian): magic `DLCK`, `u32` version, `u64` length +
//! UTF-8 config text, 32-byte config hash, `u64` step, two RNG states
//! (32-byte seed, `u64` stream, `u128` word position), two Adam headers
//! (`f64` lr, beta1, beta2, eps, `u64` t), `u64` tensor count, then per
//! tensor `u32` name length + name, `u8` dtype (0 = f64), `u32` rank,
//! `u64` dims and `f64` payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"DLCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 of a canonical config rendering.
pub fn config_hash(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical serialized run configuration.
    pub config_text: String,
    /// Hash of the training-relevant part of the configuration.
    pub config_hash: [u8; 32],
    pub state: TrainState,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn rng(&mut self, r: &ChaCha8Rng) -> Result<()> {
        self.bytes(&r.get_seed())?;
        self.u64(r.get_stream())?;
        self.bytes(&r.get_word_pos().to_le_bytes())
    }
    fn adam(&mut self, a: &Adam) -> Result<()> {
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            self.f64(v)?;
        }
        self.u64(a.t)
    }
    fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.u32(name.len() as u32)?;
        self.bytes(name.as_bytes())?;
        self.bytes(&[DTYPE_F64])?;
        self.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        for &v in t.data() {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|_| fmt_err("truncated checkpoint"))?;
        Ok(b)
    }
    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        (&mut self.0).take(n as u64).read_to_end(&mut b)?;
        if b.len() != n {
            return Err(fmt_err("truncated checkpoint"));
        }
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let mut r = ChaCha8Rng::from_seed(self.array()?);
        r.set_stream(self.u64()?);
        r.set_word_pos(u128::from_le_bytes(self.array()?));
        Ok(r)
    }
    fn adam(&mut self) -> Result<Adam> {
        let (lr, beta1, beta2, eps) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let mut a = Adam::new(lr, beta1, beta2);
        a.eps = eps;
        a.t = self.u64()?;
        Ok(a)
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.vec(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        let [dtype] = self.array::<1>()?;
        if dtype != DTYPE_F64 {
            return Err(fmt_err(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err("tensor too large"))?;
        let raw = self.vec(n.checked_mul(8).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let groups: [(&str, &BTreeMap<String, Tensor>); 6] = [
        ("param/", &state.params.tensors),
        ("buffer/", &state.params.buffers),
        ("adam.gen.m/", &state.gen_opt.m),
        ("adam.gen.v/", &state.gen_opt.v),
        ("adam.dsc.m/", &state.dsc_opt.m),
        ("adam.dsc.v/", &state.dsc_opt.v),
    ];
    for (prefix, map) in groups {
        out.extend(map.iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
    }
    out
}

pub fn write_checkpoint(w: impl Write, ck: &Checkpoint) -> Result<()> {
    let mut w = Writer(w);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u64(ck.config_text.len() as u64)?;
    w.bytes(ck.config_text.as_bytes())?;
    w.bytes(&ck.config_hash)?;
    w.u64(ck.state.step)?;
    w.rng(&ck.state.data_rng)?;
    w.rng(&ck.state.dsc_rng)?;
    w.adam(&ck.state.gen_opt)?;
    w.adam(&ck.state.dsc_opt)?;
    let tensors = named_tensors(&ck.state);
    w.u64(tensors.len() as u64)?;
    for (name, t) in tensors {
        w.tensor(&name, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader(r);
    if &r.array::<4>()? != MAGIC {
        return Err(fmt_err("not a DLCK checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let len = r.u64()? as usize;
    let config_text = String::from_utf8(r.vec(len)?).map_err(|_| fmt_err("config text is not UTF-8"))?;
    let config_hash = r.array::<32>()?;
    let step = r.u64()?;
    let data_rng = r.rng()?;
    let dsc_rng = r.rng()?;
    let mut gen_opt = r.adam()?;
    let mut dsc_opt = r.adam()?;
    let mut params = ModelParams { tensors: BTreeMap::new(), buffers: BTreeMap::new() };
    let count = r.u64()?;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        let (prefix, key) = name.split_once('/').ok_or_else(|| fmt_err(format!("unprefixed tensor {name}")))?;
        let map = match prefix {
            "param" => &mut params.tensors,
            "buffer" => &mut params.buffers,
            "adam.gen.m" => &mut gen_opt.m,
            "adam.gen.v" => &mut gen_opt.v,
            "adam.dsc.m" => &mut dsc_opt.m,
            "adam.dsc.v" => &mut dsc_opt.v,
            _ => return Err(fmt_err(format!("unknown tensor group {prefix}"))),
        };
        if map.insert(key.to_string(), t).is_some() {
            return Err(fmt_err(format!("duplicate tensor {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        config_text,
        config_hash,
        state: TrainState { step, params, gen_opt, dsc_opt, data_rng, dsc_rng },
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
