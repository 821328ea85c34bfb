use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ParamGroup, Prismer, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "prismer-checkpoint-1";

fn param_file(name: &str) -> String {
    format!("params/{name}.pten")
}

/// Writes `manifest.txt` plus `params/<name>.pten` for every parameter.
///
/// Manifest lines are `key=value`: `format`, `seed`, `step`, every config
/// field, then one `param.<name>=<group>,<frozen|trainable>` line per
/// parameter in registration order.
pub fn save_checkpoint(model: &Prismer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut out = String::new();
    out.push_str(&format!(
        "format={FORMAT}\nseed={}\nstep={}\n",
        model.seed, model.store.step
    ));
    for (k, v) in model.config.to_kv() {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (_, p) in model.store.iter() {
        let state = if p.frozen { "frozen" } else { "trainable" };
        out.push_str(&format!("param.{}={},{state}\n", p.name, p.group.name()));
        let mut w = BufWriter::new(fs::File::create(dir.join(param_file(&p.name)))?);
        p.value.write_pten(&mut w)?;
        w.flush()?;
    }
    fs::write(dir.join(CHECKPOINT_MANIFEST), out)?;
    Ok(())
}

/// Rebuilds the model from its manifest and overwrites every parameter with
/// the stored tensor. Values are stored as f32.
pub fn load_checkpoint(dir: &Path) -> Result<Prismer> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let mut header = BTreeMap::new();
    let mut config = ModelConfig::desk_z();
    let mut params = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            ModelError::Config(format!("manifest line {}: expected key=value", n + 1))
        })?;
        if let Some(name) = k.strip_prefix("param.") {
            let (group, state) = v.split_once(',').ok_or_else(|| {
                ModelError::Config(format!("manifest line {}: bad parameter entry", n + 1))
            })?;
            let group = ParamGroup::from_name(group)
                .ok_or_else(|| ModelError::Config(format!("unknown parameter group {group:?}")))?;
            params.push((name.to_string(), group, state == "frozen"));
        } else if k.starts_with("model.") || k.starts_with("experts.") {
            config.set(k, v)?;
        } else {
            header.insert(k.to_string(), v.to_string());
        }
    }
    if header.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ModelError::Config(format!(
            "not a checkpoint manifest (format {:?})",
            header.get("format")
        )));
    }
    let parse = |key: &str| -> Result<u64> {
        header
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::Config(format!("manifest lacks a numeric {key}")))
    };
    let mut model = Prismer::new(config, parse("seed")?)?;
    model.store.step = parse("step")?;
    if params.len() != model.store.len() {
        return Err(ModelError::Config(format!(
            "manifest lists {} parameters, the configuration has {}",
            params.len(),
            model.store.len()
        )));
    }
    for (name, group, frozen) in params {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
        let bytes = fs::read(dir.join(param_file(&name)))?;
        let value = Tensor::read_pten(&mut bytes.as_slice())?;
        let p = model.store.get_mut(id);
        if value.shape() != p.value.shape() || group != p.group {
            return Err(ModelError::Config(format!(
                "{name}: stored {:?}/{group}, expected {:?}/{}",
                value.shape(),
                p.value.shape(),
                p.group
            )));
        }
        p.value = value;
        p.frozen = frozen;
    }
    Ok(model)
}
