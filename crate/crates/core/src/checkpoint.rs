//! Model checkpoints as safetensors files: every parameter and buffer as an
//! `F64` tensor, with the model configuration echoed as JSON in the header.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{BgCrack, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const CONFIG_KEY: &str = "bgcrack_config";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "bgcrack-f64-v1";

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn to_bytes(model: &BgCrack) -> Result<Vec<u8>> {
    let entries: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .params()
        .chain(model.store.buffers())
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), le_bytes(t)))
        .collect();
    let views = entries
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(&model.config)?);
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<BgCrack> {
    let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint header has no metadata".into()))?;
    let config: ModelConfig = serde_json::from_str(
        meta.get(CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no model config".into()))?,
    )?;
    let st = SafeTensors::deserialize(bytes).map_err(ck)?;
    let mut store = ParamStore::new();
    for (name, view) in st.iter() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("{name}: expected F64, found {:?}", view.dtype())));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(view.shape(), data)?;
        if is_buffer(name) {
            store.insert_buffer(name, t);
        } else {
            store.insert_param(name, t);
        }
    }
    check_compatible(&config, &store)?;
    Ok(BgCrack { config, store })
}

/// Every tensor the configuration expects must be present with the same shape.
fn check_compatible(config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let reference = BgCrack::new(config.clone(), 0)?;
    let expect = reference.store.params().chain(reference.store.buffers());
    for (name, t) in expect {
        let got = store.param(name).or_else(|| store.buffer(name));
        match got {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match config ({:?})",
                    g.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{name} missing from checkpoint"))),
        }
    }
    let n_ref = reference.store.params().count() + reference.store.buffers().count();
    let n_got = store.params().count() + store.buffers().count();
    if n_ref != n_got {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n_got} tensors, config expects {n_ref}"
        )));
    }
    Ok(())
}

pub fn save(model: &BgCrack, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BgCrack> {
    from_bytes(&fs::read(path)?)
}
