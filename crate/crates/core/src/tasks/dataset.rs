//! `PMPD` dataset container: a little-endian binary file of length-prefixed
//! instance records plus a JSON sidecar at `<path>.json`.
//!
//! Layout: `b"PMPD"`, `u16` version, `u32` record count, then per record a
//! `u32` byte length followed by `u32` node count, feature width, class
//! count and edge count, the `f32` feature matrix, `u32` edge pairs, `u32`
//! targets and one `u8` flag byte per node.

use std::path::{Path, PathBuf};

use pmp_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::GraphInstance;
use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

pub const MAGIC: &[u8; 4] = b"PMPD";
pub const VERSION: u16 = 1;

/// Human-readable description stored next to the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub task: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub instances: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub instances: Vec<GraphInstance>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(buf: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| PmpError::Format(format!("{x} does not fit in u32")))?;
    buf.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn encode_record(g: &GraphInstance) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    put_u32(&mut buf, g.n_nodes())?;
    put_u32(&mut buf, g.feature_dim())?;
    put_u32(&mut buf, g.n_classes)?;
    put_u32(&mut buf, g.topology.n_edges())?;
    for &x in g.features.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &(s, d) in g.topology.edges() {
        put_u32(&mut buf, s)?;
        put_u32(&mut buf, d)?;
    }
    for &y in &g.targets {
        put_u32(&mut buf, y)?;
    }
    buf.extend_from_slice(&g.flags);
    Ok(buf)
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
            .ok_or_else(|| PmpError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn decode_record(bytes: &[u8]) -> Result<GraphInstance> {
    let mut r = Reader { bytes, pos: 0 };
    let n = r.u32()?;
    let df = r.u32()?;
    let c = r.u32()?;
    let m = r.u32()?;
    let expected = 16 + 4 * n * df + 8 * m + 4 * n + n;
    if bytes.len() != expected {
        return Err(PmpError::Format(format!(
            "record is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let features = (0..n * df).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let edges = (0..m)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let flags = r.take(n)?.to_vec();
    let g = GraphInstance {
        features: Tensor::from_vec(n, df, features)?,
        topology: GraphTopology::new(n, edges)?,
        targets,
        flags,
        n_classes: c,
    };
    g.validate()?;
    Ok(g)
}

impl Dataset {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.instances.len())?;
        for g in &self.instances {
            let rec = encode_record(g)?;
            put_u32(&mut out, rec.len())?;
            out.extend_from_slice(&rec);
        }
        Ok(out)
    }

    /// Decodes the binary part; task metadata is left empty.
    pub fn decode(bytes: &[u8]) -> Result<Vec<GraphInstance>> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PmpError::Format("missing PMPD magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(PmpError::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let count = r.u32()?;
        let mut out = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = r.u32()?;
            let rec = r.take(len)?;
            out.push(decode_record(rec).map_err(|e| PmpError::Format(format!("record {i}: {e}")))?);
        }
        if r.pos != bytes.len() {
            return Err(PmpError::Format("trailing bytes after last record".into()));
        }
        Ok(out)
    }

    pub fn sidecar(&self) -> Sidecar {
        let first = self.instances.first();
        Sidecar {
            task: self.task.clone(),
            params: self.params.clone(),
            seed: self.seed,
            instances: self.instances.len(),
            feature_dim: first.map_or(0, |g| g.feature_dim()),
            n_classes: first.map_or(0, |g| g.n_classes),
            nodes: self.instances.iter().map(|g| g.n_nodes()).collect(),
            edges: self
                .instances
                .iter()
                .map(|g| g.topology.n_edges())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes)
            .map_err(|e| PmpError::io(format!("writing {}", path.display()), e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&side, json + "\n")
            .map_err(|e| PmpError::io(format!("writing {}", side.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| PmpError::io(format!("reading {}", path.display()), e))?;
        let instances = Self::decode(&bytes)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side)
            .map_err(|e| PmpError::io(format!("reading {}", side.display()), e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        if meta.instances != instances.len() {
            return Err(PmpError::Format(format!(
                "sidecar lists {} instances, file has {}",
                meta.instances,
                instances.len()
            )));
        }
        Ok(Self {
            task: meta.task,
            params: meta.params,
            seed: meta.seed,
            instances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{TEST, TRAIN};

    fn sample() -> Dataset {
        let g = GraphInstance {
            features: Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1e-7, 3.5]).unwrap(),
            topology: GraphTopology::new(3, vec![(0, 1), (2, 1), (1, 0)]).unwrap(),
            targets: vec![2, 0, 1],
            flags: vec![TRAIN, TEST, 0],
            n_classes: 3,
        };
        Dataset {
            task: "toy".into(),
            params: serde_json::json!({"a": 1}),
            seed: 9,
            instances: vec![g.clone(), g],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pmpd");
        let ds = sample();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(Dataset::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Dataset::decode(&extra).is_err());
    }
}
