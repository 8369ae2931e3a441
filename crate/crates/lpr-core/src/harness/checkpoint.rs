//! Single-file checkpoint container: a JSON header (config, step, array
//! names) followed by every parameter and optimizer array in the `.lpt`
//! tensor encoding. Reloads are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::arrayfile;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LPRCKPT1";

/// Adam moment estimates, keyed like the trainable parameters.
#[derive(Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    pub t: u64,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    trainable: Vec<String>,
    frozen: Vec<String>,
    has_adam: bool,
    adam_t: u64,
}

impl Checkpoint {
    /// Drop a parameter group (e.g. `gci.` or `smf.`) from the checkpoint.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.store.remove_prefix(prefix);
        if let Some(adam) = &mut self.adam {
            adam.m.retain(|k, _| !k.starts_with(prefix));
            adam.v.retain(|k, _| !k.starts_with(prefix));
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            trainable: self.store.trainable.keys().cloned().collect(),
            frozen: self.store.frozen.keys().cloned().collect(),
            has_adam: self.adam.is_some(),
            adam_t: self.adam.as_ref().map(|a| a.t).unwrap_or(0),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for name in &header.trainable {
            arrayfile::write_f64_to(&mut w, &self.store.trainable[name])?;
        }
        for name in &header.frozen {
            arrayfile::write_f64_to(&mut w, &self.store.frozen[name])?;
        }
        if let Some(adam) = &self.adam {
            for name in &header.trainable {
                arrayfile::write_f64_to(&mut w, &adam.m[name])?;
            }
            for name in &header.trainable {
                arrayfile::write_f64_to(&mut w, &adam.v[name])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut lenbuf = [0u8; 8];
        r.read_exact(&mut lenbuf)?;
        let header_len = u64::from_le_bytes(lenbuf) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let mut store = ParamStore::new();
        for name in &header.trainable {
            store.trainable.insert(name.clone(), arrayfile::read_f64_from(&mut r)?);
        }
        for name in &header.frozen {
            store.frozen.insert(name.clone(), arrayfile::read_f64_from(&mut r)?);
        }
        let adam = if header.has_adam {
            let mut m = BTreeMap::new();
            for name in &header.trainable {
                m.insert(name.clone(), arrayfile::read_f64_from(&mut r)?);
            }
            let mut v = BTreeMap::new();
            for name in &header.trainable {
                v.insert(name.clone(), arrayfile::read_f64_from(&mut r)?);
            }
            Some(AdamState { m, v, t: header.adam_t })
        } else {
            None
        };
        Ok(Checkpoint { config: header.config, step: header.step, store, adam })
    }
}
