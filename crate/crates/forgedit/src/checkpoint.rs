//! Parameter checkpoints: one safetensors archive of f64 tensors keyed by
//! parameter path, with the stage layout in the archive metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use forgedit_core::{Array, DenoiserParams, StageLayout};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext};
use crate::store::write_atomic;
use crate::Result;

pub const FORMAT: &str = "forgedit-params/1";
const META_KEY: &str = "forgedit";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    layout: StageLayout,
}

pub fn to_bytes(params: &DenoiserParams) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .entries()
        .iter()
        .map(|(k, a)| (k.clone(), a.shape().to_vec(), a.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let mut views = Vec::with_capacity(raw.len());
    for (k, shape, bytes) in &raw {
        let view = TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(|e| format_err(Path::new(k), e))?;
        views.push((k.as_str(), view));
    }
    let manifest = Manifest { format: FORMAT.into(), layout: *params.layout() };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&manifest)?)]);
    safetensors::tensor::serialize(views, Some(meta)).map_err(|e| format_err(Path::new("<checkpoint>"), e))
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<DenoiserParams> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| format_err(origin, e))?;
    let manifest = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| format_err(origin, "missing layout manifest"))?;
    let manifest: Manifest = serde_json::from_str(manifest)?;
    if manifest.format != FORMAT {
        return Err(format_err(origin, format!("unsupported format {:?}", manifest.format)));
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| format_err(origin, e))?;
    let mut entries = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(format_err(origin, format!("{name}: expected f64, found {:?}", view.dtype())));
        }
        let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.insert(name, Array::from_vec(view.shape(), data)?);
    }
    Ok(DenoiserParams::from_entries(manifest.layout, entries)?)
}

pub fn save(params: &DenoiserParams, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params)?)
}

pub fn load(path: &Path) -> Result<DenoiserParams> {
    let bytes = std::fs::read(path).at(path)?;
    from_bytes(&bytes, path)
}
