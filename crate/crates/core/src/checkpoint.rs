//! `PMPC` checkpoint files.
//!
//! Layout (little-endian): `b"PMPC"`, `u16` version, `u64` config hash,
//! `u64` epoch, `u64` optimizer step, RNG state (32-byte seed, `u64`
//! stream, `u128` word position), `u32` feature width, `u32` class count,
//! `f64` best validation score, `u64` best epoch, `u64` epochs without
//! improvement, length-prefixed config JSON, then the parameter tensors in
//! declaration order (name, rows, cols, `f32` values) and a flag byte
//! followed by the optimizer moments when present.

use std::path::Path;

use pmp_autodiff::{ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{PmpError, Result};

pub const MAGIC: &[u8; 4] = b"PMPC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Config JSON exactly as stored.
    pub config_json: String,
    pub config_hash: u64,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub best_val: f64,
    pub best_epoch: u64,
    pub stale_epochs: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    /// Adam first and second moments, in parameter order.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_json(&self.config_json)
    }

    /// Copies the stored tensors into `store`, which must have the same
    /// layout.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(PmpError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for ((name, t), entry) in self.params.iter().zip(store.entries()) {
            if *name != entry.name || t.shape() != entry.value.shape() {
                return Err(PmpError::Format(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
        }
        store.load_values(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.config_hash.to_le_bytes());
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut w, self.feature_dim)?;
        put_u32(&mut w, self.n_classes)?;
        w.extend_from_slice(&self.best_val.to_le_bytes());
        w.extend_from_slice(&self.best_epoch.to_le_bytes());
        w.extend_from_slice(&self.stale_epochs.to_le_bytes());
        put_bytes(&mut w, self.config_json.as_bytes())?;
        put_u32(&mut w, self.params.len())?;
        for (name, t) in &self.params {
            put_bytes(&mut w, name.as_bytes())?;
            put_tensor(&mut w, t)?;
        }
        match &self.moments {
            None => w.push(0),
            Some((m, v)) => {
                w.push(1);
                for t in m.iter().chain(v) {
                    put_tensor(&mut w, t)?;
                }
            }
        }
        Ok(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PmpError::Format("missing PMPC magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(PmpError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_hash = r.u64()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let feature_dim = r.u32()?;
        let n_classes = r.u32()?;
        let best_val = f64::from_le_bytes(r.array()?);
        let best_epoch = r.u64()?;
        let stale_epochs = r.u64()?;
        let config_json = r.string()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            params.push((name, r.tensor()?));
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            1 => {
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some((m, v))
            }
            other => return Err(PmpError::Format(format!("bad moments flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(PmpError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            config_json,
            config_hash,
            epoch,
            step,
            rng,
            feature_dim,
            n_classes,
            best_val,
            best_epoch,
            stale_epochs,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)
            .map_err(|e| PmpError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| PmpError::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| PmpError::Format(format!("{x} does not fit in u32")))?;
    w.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(w, b.len())?;
    w.extend_from_slice(b);
    Ok(())
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, t.rows())?;
    put_u32(w, t.cols())?;
    for &x in t.data() {
        w.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                PmpError::Format(format!("checkpoint truncated at byte {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| PmpError::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| PmpError::Format("tensor size overflows".into()))?;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| PmpError::Format("tensor size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data)?)
    }
}
