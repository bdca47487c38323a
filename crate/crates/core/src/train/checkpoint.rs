//! Binary checkpoint format.
//!
//! ```text
//! magic "PFCKPT" u16 version
//! u64 step, str fingerprint
//! u32 n, n x (str key, str value)            metadata
//! u32 n, n x tensor                          parameters and buffers
//! u32 n, n x tensor                          momentum velocities
//! u8 has_rng [32 bytes seed, u64 stream, u128 word position]
//! 32 bytes SHA-256 of everything before
//! ```
//! Integers are little endian, `str` is a u32 length plus UTF-8, `tensor` is
//! `str name, u32 ndim, ndim x u64 dims, f32 values`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::archspec::ArchSpec;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"PFCKPT";
const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub arch_fingerprint: String,
    /// Free-form settings needed to rebuild the network, such as the architecture text.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub velocity: ParamStore<f32>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn file_name(step: usize) -> String {
        format!("param-at-{step}.ckpt")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&(self.step as u64).to_le_bytes());
        put_str(&mut w, &self.arch_fingerprint);
        w.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        for store in [&self.params, &self.velocity] {
            w.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for (name, t) in store.iter() {
                put_str(&mut w, name);
                w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for d in t.shape() {
                    w.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.rng {
            None => w.push(0),
            Some(r) => {
                w.push(1);
                w.extend_from_slice(&r.seed);
                w.extend_from_slice(&r.stream.to_le_bytes());
                w.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + DIGEST_LEN {
            return Err(corrupt("file is too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let step = usize::try_from(r.u64()?).map_err(|_| corrupt("step overflows"))?;
        let arch_fingerprint = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let params = r.store()?;
        let velocity = r.store()?;
        let rng = match r.take(1)?[0] {
            0 => None,
            1 => Some(RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) }),
            _ => return Err(corrupt("bad rng flag")),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { step, arch_fingerprint, meta, params, velocity, rng })
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_string())
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn store(&mut self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for _ in 0..self.u32()? {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(corrupt("tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflows"))?;
                numel = numel.checked_mul(d).ok_or_else(|| corrupt("tensor size overflows"))?;
                shape.push(d);
            }
            let bytes = numel.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = self.take(bytes)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if store.contains(&name) {
                return Err(corrupt(&format!("duplicate tensor `{name}`")));
            }
            store.insert(&name, Tensor::from_vec(shape, data).expect("size computed from shape"));
        }
        Ok(store)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, c.encode()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a checkpoint without checking which architecture it belongs to.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::decode(&bytes)
}

/// Reads a checkpoint and verifies it was written for `arch`.
pub fn load_checkpoint(path: &Path, arch: &ArchSpec) -> Result<Checkpoint> {
    let c = read_checkpoint(path)?;
    let expected = arch.fingerprint();
    if c.arch_fingerprint != expected {
        return Err(Error::FingerprintMismatch { expected, found: c.arch_fingerprint });
    }
    Ok(c)
}
