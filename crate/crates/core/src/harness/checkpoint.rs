//! Checkpoints: a binary blob of little-endian `f64` arrays plus a JSON
//! manifest giving each array's name, shape and byte offset.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rl::{AdamConfig, SharedParams};
use crate::tensor::{ParamStore, Tensor};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LEMNCKPT";
const HEADER_LEN: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
    /// Byte offset of the first element inside the weights file.
    pub offset: u64,
    /// Adam updates applied to this parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Training steps applied when the checkpoint was taken.
    pub step: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `shared` (parameters and optimizer state) into `dir`.
pub fn save_checkpoint(dir: &Path, shared: &SharedParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (first, second, counts) = shared.moments();
    let mut blob = Vec::with_capacity(HEADER_LEN as usize);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut entries = Vec::new();
    let mut push = |name: &str, kind, t: &Tensor, updates| {
        entries.push(ManifestEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            updates,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (id, name, t) in shared.store().iter() {
        push(name, ArrayKind::Param, t, Some(counts[id.index()]));
    }
    for (id, name, _) in shared.store().iter() {
        push(name, ArrayKind::AdamFirst, &first[id.index()], None);
        push(name, ArrayKind::AdamSecond, &second[id.index()], None);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: shared.version(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            m.format_version
        )));
    }
    Ok(m)
}

struct Loaded {
    manifest: Manifest,
    blob: Vec<u8>,
}

impl Loaded {
    fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let blob = fs::read(dir.join(WEIGHTS_FILE))?;
        if blob.len() < HEADER_LEN as usize || &blob[..8] != MAGIC {
            return Err(Error::Checkpoint("weights file has no checkpoint header".into()));
        }
        let version = u32::from_le_bytes(blob[8..12].try_into().expect("four bytes"));
        if version != manifest.format_version {
            return Err(Error::Checkpoint("weights and manifest versions differ".into()));
        }
        Ok(Self { manifest, blob })
    }

    fn entry(&self, name: &str, kind: ArrayKind) -> Result<&ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {kind:?} array for {name}")))
    }

    fn tensor(&self, name: &str, kind: ArrayKind, expected: &[usize]) -> Result<Tensor> {
        let e = self.entry(name, kind)?;
        if e.shape != expected {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?} does not match model shape {expected:?}",
                e.shape
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if start < HEADER_LEN as usize || end > self.blob.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: array lies outside the weights file"
            )));
        }
        let data = self.blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect();
        Ok(Tensor::new(e.shape.clone(), data)?)
    }

    fn check_names(&self, store: &ParamStore) -> Result<()> {
        let params = self.manifest.entries.iter().filter(|e| e.kind == ArrayKind::Param);
        for e in params {
            if store.id(&e.name).is_none() {
                return Err(Error::Checkpoint(format!("model has no parameter {}", e.name)));
            }
        }
        Ok(())
    }
}

/// Overwrites the values of `store` with those saved in `dir`. Returns the
/// checkpoint's step.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<u64> {
    let ck = Loaded::open(dir)?;
    ck.check_names(store)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = ck.tensor(&name, ArrayKind::Param, &shape)?;
    }
    Ok(ck.manifest.step)
}

/// Rebuilds parameters and optimizer state for resuming training. `store`
/// supplies names and shapes.
pub fn load_checkpoint(dir: &Path, mut store: ParamStore, adam: AdamConfig) -> Result<SharedParams> {
    let step = load_params(dir, &mut store)?;
    let ck = Loaded::open(dir)?;
    let mut first = Vec::with_capacity(store.len());
    let mut second = Vec::with_capacity(store.len());
    let mut counts = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        first.push(ck.tensor(name, ArrayKind::AdamFirst, t.shape())?);
        second.push(ck.tensor(name, ArrayKind::AdamSecond, t.shape())?);
        counts.push(ck.entry(name, ArrayKind::Param)?.updates.unwrap_or(0));
    }
    let mut shared = SharedParams::new(store, adam);
    shared.restore(first, second, counts, step)?;
    Ok(shared)
}
