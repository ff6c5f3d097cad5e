//! Checkpoint archives.
//!
//! An archive is one JSON header line followed by a float32 payload:
//!
//! ```text
//! {"format":"HSCK1","config":{...},"step":500,"adam_steps":[500,500],
//!  "tensors":[{"name":"encoder.local.embed.weight","shape":[15,32],"offset":0}, ...]}\n
//! <little-endian float32 values>
//! ```
//!
//! `offset` counts float32 values from the start of the payload. Tensor
//! names are the dotted parameter names of the policy (`encoder.*`,
//! `policy.*`) and discriminator (`disc.*`); Adam moments are stored as
//! `optim.model.m.<name>`, `optim.model.v.<name>`, `optim.disc.m.<name>` and
//! `optim.disc.v.<name>`. Values are rounded to float32, so a resumed run
//! continues from a float32 copy of the state.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use hiersoc_core::autodiff::{ParamStore, Tensor};
use hiersoc_core::imitation::{DiscriminatorConfig, LossWeights, TrainConfig, Trainer};
use hiersoc_core::policy::{HierarchicalPolicy, ModelConfig};

use crate::error::{Error, Result};

pub const FORMAT: &str = "HSCK1";

/// Configuration record stored with the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: CheckpointConfig,
    step: u64,
    adam_steps: [u64; 2],
    tensors: Vec<Entry>,
}

fn push_store(entries: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, values: Option<&[Tensor]>) {
    for (i, (name, t)) in store.iter().enumerate() {
        let t = values.map_or(t, |v| &v[i]);
        entries.push((format!("{prefix}{name}"), t.clone()));
    }
}

pub fn write_trainer<W: Write>(tr: &Trainer, mut w: W) -> Result<()> {
    let mut tensors = Vec::new();
    push_store(&mut tensors, "", &tr.model.params, None);
    push_store(&mut tensors, "", &tr.disc.params, None);
    push_store(&mut tensors, "optim.model.m.", &tr.model.params, Some(&tr.model_opt.m));
    push_store(&mut tensors, "optim.model.v.", &tr.model.params, Some(&tr.model_opt.v));
    push_store(&mut tensors, "optim.disc.m.", &tr.disc.params, Some(&tr.disc_opt.m));
    push_store(&mut tensors, "optim.disc.v.", &tr.disc.params, Some(&tr.disc_opt.v));
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: [t.rows, t.cols],
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        config: CheckpointConfig {
            model: tr.model.config().clone(),
            discriminator: tr.disc.config().clone(),
            train: tr.config.clone(),
            weights: tr.weights.clone(),
        },
        step: tr.step,
        adam_steps: [tr.model_opt.t, tr.disc_opt.t],
        tensors: entries,
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("encoding checkpoint: {e}")))?;
    buf.push(b'\n');
    for (name, t) in &tensors {
        for &v in &t.data {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Numerical(format!("tensor {name} holds {v}, not storable as float32")));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_trainer<R: Read>(r: R) -> Result<Trainer> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.pop() != Some(b'\n') {
        return Err(Error::Data("checkpoint header has no terminating newline".into()));
    }
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::Data(format!("malformed checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Data(format!("checkpoint format {:?}, expected {FORMAT:?}", header.format)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(Error::Data("checkpoint payload is not a whole number of float32 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let mut table: HashMap<&str, Tensor> = HashMap::new();
    for e in &header.tensors {
        let len = e.shape[0] * e.shape[1];
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Data(format!("tensor {} runs past the payload", e.name)))?;
        table.insert(&e.name, Tensor::new(e.shape[0], e.shape[1], data.to_vec()));
    }

    let c = &header.config;
    let mut tr = Trainer::new(&c.model, &c.discriminator, &c.train, &c.weights)?;
    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let t = table
            .remove(name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        if (t.rows, t.cols) != (like.rows, like.cols) {
            return Err(Error::Data(format!(
                "tensor {name} is {}x{}, model expects {}x{}",
                t.rows, t.cols, like.rows, like.cols
            )));
        }
        Ok(t)
    };
    for (store, opt, prefix) in [
        (&mut tr.model.params, &mut tr.model_opt, "model"),
        (&mut tr.disc.params, &mut tr.disc_opt, "disc"),
    ] {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = store.name(id).to_string();
            let like = store.get(id).clone();
            *store.get_mut(id) = take(name.clone(), &like)?;
            opt.m[i] = take(format!("optim.{prefix}.m.{name}"), &like)?;
            opt.v[i] = take(format!("optim.{prefix}.v.{name}"), &like)?;
        }
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Data(format!("checkpoint has unknown tensor {extra}")));
    }
    tr.step = header.step;
    tr.model_opt.t = header.adam_steps[0];
    tr.disc_opt.t = header.adam_steps[1];
    Ok(tr)
}

pub fn save_trainer(tr: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_trainer(tr, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

pub fn load_trainer(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("opening {}: {e}", path.display())))?;
    read_trainer(f).map_err(|e| e.context(&path.display().to_string()))
}

/// The policy stored in a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<HierarchicalPolicy> {
    Ok(load_trainer(path)?.model)
}
