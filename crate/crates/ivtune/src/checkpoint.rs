//! Model and optimizer checkpointing on top of the tensor container.
//!
//! The architecture configuration is embedded as a numeric metadata entry,
//! so a checkpoint reconstructs an identical model (same forward outputs,
//! same trainable flags, same batch-norm statistics) with no side channel.
//! Loads are all-or-nothing: any missing, extra or mismatched entry is a
//! hard error.

use crate::config::{ModelConfig, Variant};
use crate::container::{load_container, save_container};
use crate::error::{Error, Result};
use crate::model::IvModel;
use crate::optim::Optimizer;
use crate::config::OptimizerKind;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::path::Path;

const CONFIG_ENTRY: &str = "__config__";
const TRAINABLE_ENTRY: &str = "__trainable__";
const OPT_META_ENTRY: &str = "opt.__meta__";
const CONFIG_LEN: usize = 13;
const CHECKPOINT_FORMAT: f64 = 1.0;

fn config_vector(cfg: &ModelConfig) -> Tensor {
    let v = vec![
        CHECKPOINT_FORMAT,
        cfg.image_size as f64,
        cfg.patch_size as f64,
        cfg.depth as f64,
        cfg.width as f64,
        cfg.heads as f64,
        cfg.mlp_ratio,
        cfg.num_classes as f64,
        cfg.d_alpha as f64,
        cfg.d_beta as f64,
        cfg.split_ratio_inv as f64,
        cfg.variant.code() as f64,
        cfg.seed as f64,
    ];
    Tensor::new(vec![CONFIG_LEN], v).unwrap()
}

fn usize_field(v: f64, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
        return Err(Error::CheckpointMismatch(format!("bad integer field {what} = {v}")));
    }
    Ok(v as usize)
}

fn parse_config(t: &Tensor) -> Result<ModelConfig> {
    if t.shape() != [CONFIG_LEN] {
        return Err(Error::CheckpointMismatch(format!(
            "config entry has shape {:?}",
            t.shape()
        )));
    }
    let d = t.data();
    if d[0] != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointMismatch(format!("unknown checkpoint format {}", d[0])));
    }
    let cfg = ModelConfig {
        image_size: usize_field(d[1], "image_size")?,
        patch_size: usize_field(d[2], "patch_size")?,
        depth: usize_field(d[3], "depth")?,
        width: usize_field(d[4], "width")?,
        heads: usize_field(d[5], "heads")?,
        mlp_ratio: d[6],
        num_classes: usize_field(d[7], "num_classes")?,
        d_alpha: usize_field(d[8], "d_alpha")?,
        d_beta: usize_field(d[9], "d_beta")?,
        split_ratio_inv: usize_field(d[10], "split_ratio_inv")?,
        variant: Variant::from_code(usize_field(d[11], "variant")? as u8)?,
        seed: usize_field(d[12], "seed")? as u64,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write the model (and optionally optimizer state) to one container file.
pub fn save_checkpoint(model: &IvModel, optimizer: Option<&Optimizer>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    entries.push((CONFIG_ENTRY.to_string(), config_vector(&model.config)));
    let flags: Vec<f64> = model.store.iter().map(|p| if p.trainable { 1.0 } else { 0.0 }).collect();
    entries.push((TRAINABLE_ENTRY.to_string(), Tensor::new(vec![flags.len()], flags)?));
    for p in model.store.iter() {
        entries.push((format!("param.{}", p.name), p.tensor.clone()));
    }
    for (name, state) in model.bn_states() {
        entries.push((format!("bn.{name}.mean"), Tensor::new(vec![state.mean.len()], state.mean.clone())?));
        entries.push((format!("bn.{name}.var"), Tensor::new(vec![state.var.len()], state.var.clone())?));
        entries.push((
            format!("bn.{name}.init"),
            Tensor::new(vec![1], vec![if state.initialized { 1.0 } else { 0.0 }])?,
        ));
    }
    if let Some(opt) = optimizer {
        let kind_code = match opt.kind {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::Adam => 1.0,
            OptimizerKind::AdamW => 2.0,
        };
        entries.push((
            OPT_META_ENTRY.to_string(),
            Tensor::new(vec![4], vec![kind_code, opt.lr, opt.weight_decay, opt.step_count as f64])?,
        ));
        let (m, v) = opt.moments();
        // Store order keeps the file deterministic.
        for p in model.store.iter() {
            if let Some(buf) = m.get(&p.name) {
                entries.push((format!("opt.m.{}", p.name), Tensor::new(vec![buf.len()], buf.clone())?));
            }
            if let Some(buf) = v.get(&p.name) {
                entries.push((format!("opt.v.{}", p.name), Tensor::new(vec![buf.len()], buf.clone())?));
            }
        }
    }
    save_container(path, &entries)
}

/// Rebuild a model (and optimizer state, when present) from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(IvModel, Option<Optimizer>)> {
    let entries = load_container(path)?;
    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(entries.len());
    let mut order: Vec<String> = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        order.push(name.clone());
        map.insert(name, t);
    }
    let cfg = parse_config(
        map.get(CONFIG_ENTRY)
            .ok_or_else(|| Error::CheckpointMismatch("missing config entry".into()))?,
    )?;
    let mut model = IvModel::build(&cfg)?;

    let flags = map
        .get(TRAINABLE_ENTRY)
        .ok_or_else(|| Error::CheckpointMismatch("missing trainable flags".into()))?;
    if flags.numel() != model.store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{} trainable flags for {} parameters",
            flags.numel(),
            model.store.len()
        )));
    }
    let mut used: usize = 2;
    let flag_values = flags.data().to_vec();
    for (i, p) in model.store.iter_mut().enumerate() {
        let key = format!("param.{}", p.name);
        let t = map
            .get(&key)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter `{}`", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter `{}`: stored shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t.clone();
        p.trainable = flag_values[i] != 0.0;
        used += 1;
    }
    for (name, state) in model.bn_states_mut() {
        let mean = map
            .get(&format!("bn.{name}.mean"))
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing bn state `{name}`")))?;
        let var = map
            .get(&format!("bn.{name}.var"))
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing bn state `{name}`")))?;
        let init = map
            .get(&format!("bn.{name}.init"))
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing bn state `{name}`")))?;
        if mean.numel() != state.mean.len() || var.numel() != state.var.len() {
            return Err(Error::CheckpointMismatch(format!("bn state `{name}` has wrong width")));
        }
        state.mean = mean.data().to_vec();
        state.var = var.data().to_vec();
        state.initialized = init.data()[0] != 0.0;
        used += 3;
    }

    let optimizer = if let Some(meta) = map.get(OPT_META_ENTRY) {
        if meta.numel() != 4 {
            return Err(Error::CheckpointMismatch("bad optimizer metadata".into()));
        }
        let kind = match meta.data()[0] as i64 {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            2 => OptimizerKind::AdamW,
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown optimizer code {other}")))
            }
        };
        let mut opt = Optimizer::new(kind, meta.data()[1], meta.data()[2]);
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for name in &order {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.insert(rest.to_string(), map[name].data().to_vec());
                used += 1;
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.insert(rest.to_string(), map[name].data().to_vec());
                used += 1;
            }
        }
        // Moment buffers must belong to known parameters.
        for key in m.keys().chain(v.keys()) {
            if model.store.by_name(key).is_none() {
                return Err(Error::CheckpointMismatch(format!(
                    "optimizer moment for unknown parameter `{key}`"
                )));
            }
        }
        opt.restore(usize_field(meta.data()[3], "step count")? as u64, m, v);
        used += 1;
        Some(opt)
    } else {
        None
    };

    if used != map.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} entries, model consumed {used}",
            map.len()
        )));
    }
    Ok((model, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::BnMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.depth = 2;
        cfg.width = 8;
        cfg.heads = 2;
        cfg.d_alpha = 4;
        cfg.d_beta = 4;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn forward_outputs_survive_roundtrip_bitwise() {
        let cfg = tiny_cfg();
        let mut model = IvModel::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vis = Tensor::uniform(vec![2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let ir = Tensor::uniform(vec![2, 1, 8, 8], 0.0, 1.0, &mut rng);
        // Run once in train mode so BN stats exist and are part of the state.
        let _ = model.forward(&vis, Some(&ir), BnMode::Train).unwrap();
        let before = model.forward(&vis, Some(&ir), BnMode::Eval).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ivtn");
        save_checkpoint(&model, None, &path).unwrap();
        let (mut restored, opt) = load_checkpoint(&path).unwrap();
        assert!(opt.is_none());
        let after = restored.forward(&vis, Some(&ir), BnMode::Eval).unwrap();
        let b0: Vec<u64> = before.data().iter().map(|v| v.to_bits()).collect();
        let b1: Vec<u64> = after.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b0, b1);
        // Flags restored too.
        for (p, q) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
        }
    }

    #[test]
    fn corrupted_parameter_name_is_a_hard_error() {
        let cfg = tiny_cfg();
        let model = IvModel::build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ivtn");
        save_checkpoint(&model, None, &path).unwrap();

        // Rewrite with one parameter entry renamed.
        let mut entries = load_container(&path).unwrap();
        for (name, _) in entries.iter_mut() {
            if name == "param.head.bias" {
                *name = "param.head.extra".to_string();
            }
        }
        save_container(&path, &entries).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn optimizer_state_roundtrip() {
        use crate::optim::Optimizer;
        let cfg = tiny_cfg();
        let model = IvModel::build(&cfg).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, 0.01);
        let mut grads = HashMap::new();
        grads.insert(
            "head.bias".to_string(),
            Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
        );
        let mut model = model;
        opt.step(&mut model.store, &grads).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ivtn");
        save_checkpoint(&model, Some(&opt), &path).unwrap();
        let (_, restored) = load_checkpoint(&path).unwrap();
        let restored = restored.unwrap();
        assert_eq!(restored.step_count, 1);
        let (m0, v0) = opt.moments();
        let (m1, v1) = restored.moments();
        assert_eq!(m0.len(), m1.len());
        assert_eq!(m0["head.bias"], m1["head.bias"]);
        assert_eq!(v0["head.bias"], v1["head.bias"]);
    }
}
