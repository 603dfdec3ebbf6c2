//! Model and optimizer state in a "CSE1" container.
//!
//! Records: `param.<name>` for every parameter, `vq.codebook`,
//! `vq.ema.*`, `vq.ready`, optional `adam.*` / `train.*`, and the config
//! echo `__config__`.

use std::path::Path;

use crate::config::Config;
use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::model::SeModel;
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::vq::Codebook;

pub const CONFIG_RECORD: &str = "__config__";

/// Optimizer and schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub adam: AdamState,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
}

pub fn to_container(model: &SeModel, state: Option<&TrainingState>) -> Container {
    let mut c = Container::new();
    c.insert(CONFIG_RECORD, Record::Bytes(model.config.to_json().into_bytes()));
    for (name, id) in model.named_params() {
        c.insert_tensor(format!("param.{name}"), model.store.get(id));
    }
    c.insert_tensor("vq.codebook", &model.codebook.codewords);
    let ema = &model.ema;
    c.insert_tensor(
        "vq.ema.cluster_size",
        &Tensor::new(vec![ema.cluster_size.len()], ema.cluster_size.clone()).expect("1-d"),
    );
    c.insert_tensor("vq.ema.sums", &ema.sums);
    c.insert_i64("vq.ema.idle", ema.idle.iter().map(|&v| i64::from(v)).collect());
    c.insert_i64("vq.ready", vec![i64::from(model.codebook_ready)]);
    if let Some(s) = state {
        let a = &s.adam;
        c.insert_tensor(
            "adam.config",
            &Tensor::new(vec![4], vec![a.config.lr, a.config.beta1, a.config.beta2, a.config.eps]).expect("1-d"),
        );
        c.insert_i64("adam.step", vec![a.step as i64]);
        for (name, id) in model.named_params() {
            c.insert_tensor(format!("adam.m.{name}"), &a.m[id.index()]);
            c.insert_tensor(format!("adam.v.{name}"), &a.v[id.index()]);
        }
        c.insert_i64(
            "train.position",
            vec![s.epoch as i64, s.step_in_epoch as i64, s.global_step as i64],
        );
        if let Some(b) = s.best_val {
            c.insert_tensor("train.best_val", &Tensor::scalar(b));
        }
    }
    c
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &SeModel, state: Option<&TrainingState>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_container(model, state).to_bytes();
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// The config echoed in a checkpoint.
pub fn checkpoint_config(c: &Container) -> Result<Config> {
    let raw = c.bytes(CONFIG_RECORD)?;
    let text = std::str::from_utf8(raw).map_err(|_| Error::Malformed("config echo is not UTF-8".into()))?;
    Config::from_json(text).map_err(|e| Error::Malformed(format!("config echo: {e}")))
}

/// Rebuilds the model (and training state when present). With
/// `requested`, every architecture field must match the echo.
pub fn from_container(c: &Container, requested: Option<&Config>) -> Result<(SeModel, Option<TrainingState>)> {
    let mut config = checkpoint_config(c)?;
    if let Some(req) = requested {
        config.check_architecture(req)?;
        // Non-structural settings (paths, schedule) follow the request.
        config = req.clone();
    }
    let mut model = SeModel::new(&config)?;
    let known = |name: &str| -> bool {
        if let Some(p) = name.strip_prefix("param.") {
            return model.store.find(p).is_some();
        }
        if let Some(p) = name.strip_prefix("adam.m.").or_else(|| name.strip_prefix("adam.v.")) {
            return model.store.find(p).is_some();
        }
        matches!(
            name,
            CONFIG_RECORD
                | "vq.codebook"
                | "vq.ema.cluster_size"
                | "vq.ema.sums"
                | "vq.ema.idle"
                | "vq.ready"
                | "adam.config"
                | "adam.step"
                | "train.position"
                | "train.best_val"
        )
    };
    if let Some(bad) = c.names().find(|n| !known(n)) {
        return Err(Error::UnknownTensor(bad.to_string()));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let name = format!("param.{}", model.store.name(id));
        let t = c.tensor(&name)?;
        check_shape(&name, &t, model.store.get(id).shape())?;
        model.store.set(id, t)?;
    }
    let k = config.vq.codebook_size;
    let d = config.vq.code_dim;
    let cw = c.tensor("vq.codebook")?;
    check_shape("vq.codebook", &cw, &[k, d])?;
    model.codebook = Codebook::new(cw)?;
    let cs = c.tensor("vq.ema.cluster_size")?;
    check_shape("vq.ema.cluster_size", &cs, &[k])?;
    model.ema.cluster_size = cs.into_data();
    let sums = c.tensor("vq.ema.sums")?;
    check_shape("vq.ema.sums", &sums, &[k, d])?;
    model.ema.sums = sums;
    let idle = c.i64s("vq.ema.idle")?;
    if idle.len() != k {
        return Err(Error::Malformed(format!(
            "vq.ema.idle has {} entries, expected {k}",
            idle.len()
        )));
    }
    model.ema.idle = idle.iter().map(|&v| v.clamp(0, i64::from(u32::MAX)) as u32).collect();
    model.codebook_ready = c.i64s("vq.ready")?.first().copied().unwrap_or(0) != 0;

    let state = if c.get("adam.step").is_some() {
        let cfgv = c.tensor("adam.config")?;
        check_shape("adam.config", &cfgv, &[4])?;
        let v = cfgv.data();
        let mut adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: v[0],
                beta1: v[1],
                beta2: v[2],
                eps: v[3],
            },
        );
        adam.step = c.i64s("adam.step")?.first().copied().unwrap_or(0).max(0) as u64;
        for &id in &ids {
            let name = model.store.name(id).to_string();
            let shape = model.store.get(id).shape().to_vec();
            let m = c.tensor(&format!("adam.m.{name}"))?;
            check_shape("adam.m", &m, &shape)?;
            let vv = c.tensor(&format!("adam.v.{name}"))?;
            check_shape("adam.v", &vv, &shape)?;
            adam.m[id.index()] = m;
            adam.v[id.index()] = vv;
        }
        let pos = c.i64s("train.position")?;
        if pos.len() != 3 || pos.iter().any(|&p| p < 0) {
            return Err(Error::Malformed(
                "train.position must hold 3 non-negative entries".into(),
            ));
        }
        let best_val = match c.get("train.best_val") {
            Some(_) => Some(c.tensor("train.best_val")?.item()),
            None => None,
        };
        Some(TrainingState {
            adam,
            epoch: pos[0] as usize,
            step_in_epoch: pos[1] as usize,
            global_step: pos[2] as u64,
            best_val,
        })
    } else {
        None
    };
    Ok((model, state))
}

fn check_shape(name: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Structural {
            field: name.to_string(),
            found: format!("{:?}", t.shape()),
            expected: format!("{expected:?}"),
        });
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, requested: Option<&Config>) -> Result<(SeModel, Option<TrainingState>)> {
    from_container(&Container::load(path)?, requested)
}

pub fn load_model(path: impl AsRef<Path>, requested: Option<&Config>) -> Result<SeModel> {
    load_checkpoint(path, requested).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InputVariant;
    use crate::model::tests::{random_input, ready_model, tiny_config};
    use crate::train::new_adam;

    #[test]
    fn save_load_forward_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for v in [
            InputVariant::RawSsl,
            InputVariant::PlusIndexEmbedding,
            InputVariant::PlusCodebookVector,
        ] {
            let c = tiny_config(v);
            let m = ready_model(&c);
            let p = dir.path().join("m.ckpt");
            save_checkpoint(&p, &m, None).unwrap();
            let back = load_model(&p, None).unwrap();
            let x = random_input(9, &c, 3);
            assert_eq!(m.infer(&x, false).unwrap(), back.infer(&x, false).unwrap());
            assert_eq!(back.codebook, m.codebook);
            assert_eq!(back.ema, m.ema);
            assert!(back.codebook_ready);
        }
    }

    #[test]
    fn training_state_round_trips() {
        let c = tiny_config(InputVariant::PlusCodebookVector);
        let m = ready_model(&c);
        let mut adam = new_adam(&m);
        adam.step = 7;
        adam.m[3].data_mut()[0] = 0.25;
        let st = TrainingState {
            adam,
            epoch: 2,
            step_in_epoch: 1,
            global_step: 9,
            best_val: Some(4.5),
        };
        let (_, back) = from_container(&to_container(&m, Some(&st)), None).unwrap();
        assert_eq!(back.unwrap(), st);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(InputVariant::PlusCodebookVector);
        let m = ready_model(&c);
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, None).unwrap();

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&p, &bytes).unwrap();
        let err = load_model(&p, None).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert!(err.to_string().contains("bad magic"));

        let mut other = c.clone();
        other.model.g_dim = 16;
        let ctr = to_container(&m, None);
        let err = from_container(&ctr, Some(&other)).unwrap_err();
        assert!(
            matches!(&err, Error::Structural { field, .. } if field == "model.g_dim"),
            "{err}"
        );

        let mut ctr = to_container(&m, None);
        ctr.insert_tensor("param.bogus", &Tensor::scalar(1.0));
        assert!(matches!(from_container(&ctr, None), Err(Error::UnknownTensor(n)) if n == "param.bogus"));

        let mut ctr = to_container(&m, None);
        ctr.remove("param.g.norm.gain");
        assert!(matches!(from_container(&ctr, None), Err(Error::MissingTensor(_))));

        let bytes = to_container(&m, None).to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Truncated)
        ));
    }
}
