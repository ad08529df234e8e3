//! Checkpoints: a directory of MPNT tensor files plus a manifest mapping
//! parameter names to files and recording the model configuration.

use std::fs;
use std::path::Path;

use mpn_core::model::{Mode, MpnConfig, MpnModel};
use mpn_core::mpnt;
use mpn_core::tensor::Tensor;

use crate::error::{contract_err, Error, Result};

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, mpnt::encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mpnt::decode(&bytes).map_err(Into::into)
}

fn mode_from_str(s: &str) -> Result<Mode> {
    match s {
        "baseline" => Ok(Mode::Baseline),
        "mt_only" => Ok(Mode::MtOnly),
        "naive_mtl" => Ok(Mode::NaiveMtl),
        "full" => Ok(Mode::Full),
        other => Err(contract_err!("unknown model mode {:?}", other)),
    }
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.parse().map_err(|_| contract_err!("bad list entry {:?}", t)))
        .collect()
}

pub fn save(model: &MpnModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &model.cfg;
    let mut manifest = String::new();
    manifest.push_str("format mpn-checkpoint 1\n");
    let config_lines = [
        ("k", cfg.k.to_string()),
        ("feature_dim", cfg.feature_dim.to_string()),
        ("use_ca", (cfg.use_ca as u8).to_string()),
        ("share_conv1", (cfg.share_conv1 as u8).to_string()),
        ("share_conv2", (cfg.share_conv2 as u8).to_string()),
        ("share_ca", (cfg.share_ca as u8).to_string()),
        ("mode", cfg.mode.as_str().to_string()),
        ("num_classes", cfg.num_classes.to_string()),
        ("ca_reduction", cfg.ca_reduction.to_string()),
        ("backbone_widths", list(&cfg.backbone_widths)),
        ("backbone_strides", list(&cfg.backbone_strides)),
        ("input_h", cfg.input_h.to_string()),
        ("input_w", cfg.input_w.to_string()),
    ];
    for (key, value) in config_lines {
        manifest.push_str(&format!("config {key} {value}\n"));
    }
    for param in model.params.iter() {
        let file = format!("{}.mpnt", param.name);
        write_tensor(&dir.join(&file), &param.tensor)?;
        manifest.push_str(&format!("param {} {}\n", param.name, file));
    }
    for (name, state) in model.bn_names.iter().zip(&model.bn_states) {
        for (suffix, data) in [("running_mean", &state.mean), ("running_var", &state.var)] {
            let file = format!("{name}.{suffix}.mpnt");
            let t = Tensor::new(&[data.len()], data.clone())?;
            write_tensor(&dir.join(&file), &t)?;
            manifest.push_str(&format!("state {name}.{suffix} {file}\n"));
        }
    }
    let manifest_path = dir.join("checkpoint.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load(dir: &Path) -> Result<MpnModel> {
    let manifest_path = dir.join("checkpoint.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut config_pairs = std::collections::BTreeMap::new();
    let mut params = Vec::new();
    let mut states = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "mpn-checkpoint", "1"] => {}
            ["config", key, value] => {
                config_pairs.insert(key.to_string(), value.to_string());
            }
            ["param", name, file] => params.push((name.to_string(), file.to_string())),
            ["state", name, file] => states.push((name.to_string(), file.to_string())),
            [] => {}
            other => return Err(contract_err!("bad checkpoint manifest line {:?}", other)),
        }
    }
    let get = |key: &str| -> Result<&String> {
        config_pairs
            .get(key)
            .ok_or_else(|| contract_err!("checkpoint manifest missing config {}", key))
    };
    let cfg = MpnConfig {
        k: get("k")?.parse().map_err(|_| contract_err!("bad k"))?,
        feature_dim: get("feature_dim")?.parse().map_err(|_| contract_err!("bad feature_dim"))?,
        use_ca: get("use_ca")? == "1",
        share_conv1: get("share_conv1")? == "1",
        share_conv2: get("share_conv2")? == "1",
        share_ca: get("share_ca")? == "1",
        mode: mode_from_str(get("mode")?)?,
        num_classes: get("num_classes")?.parse().map_err(|_| contract_err!("bad num_classes"))?,
        ca_reduction: get("ca_reduction")?.parse().map_err(|_| contract_err!("bad ca_reduction"))?,
        backbone_widths: parse_list(get("backbone_widths")?)?,
        backbone_strides: parse_list(get("backbone_strides")?)?,
        input_h: get("input_h")?.parse().map_err(|_| contract_err!("bad input_h"))?,
        input_w: get("input_w")?.parse().map_err(|_| contract_err!("bad input_w"))?,
    };
    let mut model = MpnModel::new(cfg, 0)?;
    for (name, file) in params {
        let tensor = read_tensor(&dir.join(&file))?;
        let pid = model
            .params
            .find(&name)
            .ok_or_else(|| contract_err!("checkpoint names unknown parameter {}", name))?;
        let dst = &mut model.params.get_mut(pid).tensor;
        if dst.shape() != tensor.shape() {
            return Err(contract_err!(
                "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                name,
                tensor.shape(),
                dst.shape()
            ));
        }
        dst.data_mut().copy_from_slice(tensor.data());
    }
    for (name, file) in states {
        let tensor = read_tensor(&dir.join(&file))?;
        let Some((bn_name, kind)) = name.rsplit_once('.') else {
            return Err(contract_err!("bad state name {}", name));
        };
        let idx = model
            .bn_names
            .iter()
            .position(|n| n == bn_name)
            .ok_or_else(|| contract_err!("checkpoint names unknown bn layer {}", bn_name))?;
        let slot = match kind {
            "running_mean" => &mut model.bn_states[idx].mean,
            "running_var" => &mut model.bn_states[idx].var,
            other => return Err(contract_err!("bad state suffix {}", other)),
        };
        if slot.len() != tensor.len() {
            return Err(contract_err!("state {} extent mismatch", name));
        }
        slot.copy_from_slice(tensor.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpn_core::model::MpnConfig;

    #[test]
    fn roundtrip_preserves_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = MpnModel::new(MpnConfig::micro(3), 42).unwrap();
        model.bn_states[0].mean[0] = 0.123456789;
        save(&model, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in loaded.params.iter().zip(model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(loaded.bn_states[0].mean[0], 0.123456789);
    }
}
