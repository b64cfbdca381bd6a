//! Versioned checkpoint container: a small JSON header describing the
//! architecture plus named raw-f32 tensors.
//!
//! Layout: 8-byte magic, u32 little-endian header length, JSON header
//! (metadata and a sorted tensor index), then each tensor's data as
//! little-endian f32 in index order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{BackboneConfig, DiscriminatorConfig, ParamStore, G1, G2, Discriminator};
use crate::error::{Result, WdaError};

const MAGIC: &[u8; 8] = b"WDACKP01";
const VERSION: u32 = 1;

/// What a checkpoint holds besides tensors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// "g1", "g2", or "discriminator".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorConfig>,
    /// Training iterations completed when this was written.
    pub iters: u64,
    /// Effective run configuration, embedded verbatim for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// An architecture description plus its named tensors.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn from_store(mut meta: CheckpointMeta, store: &ParamStore<f32>) -> Self {
        meta.version = VERSION;
        let tensors = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        Checkpoint { meta, tensors }
    }

    /// Tensors as a [`ParamStore`] for name-matched loading.
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, v) in &self.tensors {
            store.add(name.clone(), v.clone());
        }
        store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(n, v)| TensorEntry { name: n.clone(), shape: v.shape().to_vec() })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(&header)?;
        for v in self.tensors.values() {
            let slice = v.as_slice().expect("checkpoint tensor not contiguous");
            let mut bytes = Vec::with_capacity(slice.len() * 4);
            for &x in slice {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(WdaError::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.meta.version != VERSION {
            return Err(WdaError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.meta.version
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            f.read_exact(&mut bytes)?;
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(e.name, ArrayD::from_shape_vec(IxDyn(&e.shape), data).unwrap());
        }
        let mut rest = [0u8; 1];
        if f.read(&mut rest)? != 0 {
            return Err(WdaError::Checkpoint(format!(
                "{}: trailing bytes after tensor data",
                path.display()
            )));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}

fn expect_kind(ck: &Checkpoint, kind: &str, path: &Path) -> Result<()> {
    if ck.meta.kind != kind {
        return Err(WdaError::Checkpoint(format!(
            "{}: holds a {} model, expected {}",
            path.display(),
            ck.meta.kind,
            kind
        )));
    }
    Ok(())
}

/// Rebuilds the multi-task network from a "g1" checkpoint.
pub fn load_g1(path: &Path) -> Result<(G1<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "g1", path)?;
    let cfg = ck
        .meta
        .backbone
        .ok_or_else(|| WdaError::Checkpoint("g1 checkpoint lacks a backbone config".into()))?;
    let mut net = G1::new(cfg, 0)?;
    net.params.load_matching(&ck.to_store(), |_| true)?;
    Ok((net, ck.meta))
}

/// Rebuilds the counting network from a "g2" checkpoint.
pub fn load_g2(path: &Path) -> Result<(G2<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "g2", path)?;
    let cfg = ck
        .meta
        .backbone
        .ok_or_else(|| WdaError::Checkpoint("g2 checkpoint lacks a backbone config".into()))?;
    let mut net = G2::new(cfg, 0)?;
    net.params.load_matching(&ck.to_store(), |_| true)?;
    Ok((net, ck.meta))
}

/// Rebuilds the discriminator from a "discriminator" checkpoint.
pub fn load_discriminator(path: &Path) -> Result<(Discriminator<f32>, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    expect_kind(&ck, "discriminator", path)?;
    let cfg = ck
        .meta
        .discriminator
        .clone()
        .ok_or_else(|| WdaError::Checkpoint("checkpoint lacks a discriminator config".into()))?;
    let mut net = Discriminator::new(cfg, 0)?;
    net.params.load_matching(&ck.to_store(), |_| true)?;
    Ok((net, ck.meta))
}
