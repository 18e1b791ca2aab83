//! Checkpoint directories: a JSON manifest plus PMXT parameter payloads.
//!
//! Layout:
//!   <dir>/manifest.json   hyperparameters, seed, step, parameter index
//!   <dir>/params/*.pmxt   one tensor per parameter, keyed by name
//!   <dir>/adam/*.pmxt     optional optimizer moments for resuming
//!
//! Model-specific hyperparameters live as top-level manifest keys next to
//! the bookkeeping fields, so a reader can check "D" or "L" directly.
//! Payloads are f32; loading widens back to f64.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::data::pmxt;
use crate::error::{CoreError, Result};
use crate::optim::{Adam, AdamState};
use crate::tensor::{Parameter, Tensor};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Bookkeeping keys that are not model hyperparameters.
const RESERVED: [&str; 6] = ["kind", "version", "seed", "global_step", "params", "adam"];

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub global_step: u64,
    /// Flattened model hyperparameters.
    pub hyper: Map<String, Value>,
    pub params: BTreeMap<String, Tensor>,
    pub adam_lr: Option<f64>,
    pub adam_states: BTreeMap<String, AdamState>,
}

impl Checkpoint {
    pub fn hyper_u64(&self, key: &str) -> Result<u64> {
        self.hyper
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| CoreError::Data(format!("checkpoint manifest missing integer '{key}'")))
    }

    pub fn hyper_f64(&self, key: &str) -> Result<f64> {
        self.hyper
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| CoreError::Data(format!("checkpoint manifest missing number '{key}'")))
    }

    pub fn hyper_bool(&self, key: &str) -> bool {
        self.hyper.get(key).and_then(Value::as_bool).unwrap_or(false)
    }

    /// Take a parameter tensor by name, enforcing the expected shape.
    pub fn take_param(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.params.remove(name).ok_or_else(|| {
            CoreError::Data(format!("checkpoint has no parameter '{name}'"))
        })?;
        if t.shape != shape {
            return Err(CoreError::Data(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(t)
    }
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Write a checkpoint. `hyper` entries must not collide with bookkeeping keys.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    seed: u64,
    global_step: u64,
    hyper: &Map<String, Value>,
    params: &[&Parameter],
    adam: Option<&Adam>,
) -> Result<()> {
    for key in RESERVED {
        if hyper.contains_key(key) {
            return Err(CoreError::Config(format!(
                "hyperparameter key '{key}' collides with a manifest bookkeeping field"
            )));
        }
    }
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| CoreError::io(&params_dir, e))?;

    let mut manifest = Map::new();
    manifest.insert("kind".into(), json!(kind));
    manifest.insert("version".into(), json!(CHECKPOINT_VERSION));
    manifest.insert("seed".into(), json!(seed));
    manifest.insert("global_step".into(), json!(global_step));
    for (k, v) in hyper {
        manifest.insert(k.clone(), v.clone());
    }

    let mut index = Vec::new();
    for p in params {
        let file = format!("params/{}.pmxt", p.name);
        pmxt::write_pmxt(&dir.join(&file), &p.value)?;
        index.push(json!({ "name": p.name, "shape": p.value.shape, "file": file }));
    }
    manifest.insert("params".into(), Value::Array(index));

    if let Some(adam) = adam {
        let adam_dir = dir.join("adam");
        std::fs::create_dir_all(&adam_dir).map_err(|e| CoreError::io(&adam_dir, e))?;
        let mut states = Vec::new();
        for (name, st) in adam.states() {
            let m_file = format!("adam/{name}.m.pmxt");
            let v_file = format!("adam/{name}.v.pmxt");
            pmxt::write_pmxt(&dir.join(&m_file), &st.m)?;
            pmxt::write_pmxt(&dir.join(&v_file), &st.v)?;
            states.push(json!({ "name": name, "step": st.step, "m": m_file, "v": v_file }));
        }
        manifest.insert(
            "adam".into(),
            json!({ "lr": adam.hyper.lr, "states": states }),
        );
    }

    let text = serde_json::to_string_pretty(&Value::Object(manifest))
        .map_err(|e| CoreError::Data(format!("serializing manifest: {e}")))?;
    std::fs::write(manifest_path(dir), text).map_err(|e| CoreError::io(manifest_path(dir), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(dir);
    let text = std::fs::read_to_string(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: mpath.clone(),
        offset: e.column() as u64,
        msg: format!("manifest is not valid JSON: {e}"),
    })?;
    let obj = root.as_object().ok_or_else(|| CoreError::Format {
        path: mpath.clone(),
        offset: 0,
        msg: "manifest root is not an object".into(),
    })?;
    let bad = |msg: String| CoreError::Format {
        path: mpath.clone(),
        offset: 0,
        msg,
    };

    let version = obj
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing kind".into()))?
        .to_string();
    let seed = obj.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let global_step = obj.get("global_step").and_then(Value::as_u64).unwrap_or(0);

    let mut hyper = Map::new();
    for (k, v) in obj {
        if !RESERVED.contains(&k.as_str()) {
            hyper.insert(k.clone(), v.clone());
        }
    }

    let mut params = BTreeMap::new();
    let index = obj
        .get("params")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing params index".into()))?;
    for entry in index {
        let name = entry
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("params entry missing name".into()))?;
        let file = entry
            .get("file")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("params entry '{name}' missing file")))?;
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).map(|d| d as usize).collect())
            .ok_or_else(|| bad(format!("params entry '{name}' missing shape")))?;
        let tensor = pmxt::read_pmxt(&dir.join(file))?;
        if tensor.shape != shape {
            return Err(bad(format!(
                "parameter '{name}' payload shape {:?} disagrees with manifest {:?}",
                tensor.shape, shape
            )));
        }
        params.insert(name.to_string(), tensor);
    }

    let mut adam_lr = None;
    let mut adam_states = BTreeMap::new();
    if let Some(adam) = obj.get("adam").and_then(Value::as_object) {
        adam_lr = adam.get("lr").and_then(Value::as_f64);
        if let Some(states) = adam.get("states").and_then(Value::as_array) {
            for entry in states {
                let name = entry
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("adam state missing name".into()))?;
                let step = entry.get("step").and_then(Value::as_u64).unwrap_or(0);
                let m = pmxt::read_pmxt(&dir.join(
                    entry.get("m").and_then(Value::as_str).ok_or_else(|| bad(format!("adam state '{name}' missing m")))?,
                ))?;
                let v = pmxt::read_pmxt(&dir.join(
                    entry.get("v").and_then(Value::as_str).ok_or_else(|| bad(format!("adam state '{name}' missing v")))?,
                ))?;
                adam_states.insert(name.to_string(), AdamState { m, v, step });
            }
        }
    }

    Ok(Checkpoint {
        kind,
        seed,
        global_step,
        hyper,
        params,
        adam_lr,
        adam_states,
    })
}
