//! Weights file: a versioned header line, a JSON manifest, then the values as
//! little-endian `f32` in manifest order (all parameters, then every running
//! mean followed by its variance).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_HEADER: &str = "FACSEG-WEIGHTS/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub params: Vec<ParamEntry>,
    pub stats: Vec<StatsEntry>,
    /// Free-form self-description (checkpoints embed the architecture here).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub(crate) fn encode<T: Real>(store: &ParamStore<T>, meta: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let manifest = WeightsManifest {
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().dims(),
                share_id: p.share_id.clone(),
            })
            .collect(),
        stats: store
            .all_stats()
            .iter()
            .map(|s| StatsEntry {
                name: s.name.clone(),
                channels: s.mean.len(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: T| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    for (_, p) in store.iter() {
        p.value.data().iter().for_each(|&v| put(v));
    }
    for s in store.all_stats() {
        s.mean.iter().chain(&s.var).for_each(|&v| put(v));
    }
    Ok(out)
}

pub(crate) fn decode<T: Real>(bytes: &[u8], origin: &str) -> Result<(WeightsManifest, ParamStore<T>)> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    let header_len = WEIGHTS_HEADER.len() + 1;
    if bytes.len() < header_len + 8 || &bytes[..WEIGHTS_HEADER.len()] != WEIGHTS_HEADER.as_bytes() {
        return Err(bad("missing or unsupported header"));
    }
    let mlen = u64::from_le_bytes(bytes[header_len..header_len + 8].try_into().unwrap()) as usize;
    let body = header_len + 8;
    let end = body.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: WeightsManifest = serde_json::from_slice(&bytes[body..end])?;
    let mut floats = bytes[end..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>()
        + manifest.stats.iter().map(|s| 2 * s.channels).sum::<usize>();
    if bytes.len() - end != expected * 4 {
        return Err(bad(&format!(
            "blob holds {} bytes, manifest needs {}",
            bytes.len() - end,
            expected * 4
        )));
    }
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let [n, c, h, w] = p.shape;
        let shape = Shape::new(n, c, h, w);
        let data: Vec<T> = floats.by_ref().take(shape.len()).map(|v| T::from_f64_lossy(v as f64)).collect();
        store.add_shared(p.name.clone(), Tensor::from_vec(shape, data)?, p.share_id.clone());
    }
    for s in &manifest.stats {
        let id = store.add_stats(s.name.clone(), s.channels);
        let rs = store.stats_mut(id);
        rs.mean = floats.by_ref().take(s.channels).map(|v| T::from_f64_lossy(v as f64)).collect();
        rs.var = floats.by_ref().take(s.channels).map(|v| T::from_f64_lossy(v as f64)).collect();
    }
    Ok((manifest, store))
}

/// Write atomically: the bytes go to a sibling temp file that is then renamed.
pub fn write_weights<T: Real>(path: &Path, store: &ParamStore<T>, meta: Option<serde_json::Value>) -> Result<()> {
    let bytes = encode(store, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_weights<T: Real>(path: &Path) -> Result<(WeightsManifest, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
