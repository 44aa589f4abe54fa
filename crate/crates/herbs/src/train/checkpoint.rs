//! Binary checkpoint: `HERBSCK1`, a little-endian `u64` header length, a JSON
//! header, then every parameter and momentum value as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use herbs_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::Trainer;
use crate::error::{HerbsError, Result};
use crate::net::HerbsNet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HERBSCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<ParamEntry>,
    pub has_velocity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub velocity: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &RunConfig, class_names: &[String]) -> Self {
        let mut ck = Self::of_net(&trainer.net, config, class_names);
        ck.header.epoch = trainer.epoch;
        ck.header.step = trainer.step;
        ck.header.has_velocity = true;
        ck.velocity = Some(trainer.opt.velocity.clone());
        ck
    }

    /// Weights only.
    pub fn of_net(net: &HerbsNet, config: &RunConfig, class_names: &[String]) -> Self {
        let mut offset = 0;
        let mut entries = Vec::new();
        let mut params = Vec::new();
        for (_, p) in net.store.iter() {
            entries.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
            offset += p.value.len();
            params.push(p.value.clone());
        }
        let header = CheckpointHeader {
            config: config.clone(),
            num_classes: net.num_classes(),
            class_names: class_names.to_vec(),
            epoch: 0,
            step: 0,
            params: entries,
            has_velocity: false,
        };
        Self { header, params, velocity: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let values: usize = self.params.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 16 * values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.iter().chain(self.velocity.iter().flatten()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HerbsError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut data = &bytes[16 + hlen..];
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated data"));
            }
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                data.read_exact(&mut b).expect("length checked");
                vals.push(f64::from_le_bytes(b));
            }
            Ok(Tensor::new(shape.to_vec(), vals))
        };
        let params = header.params.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
        let velocity = if header.has_velocity {
            Some(header.params.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, params, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the network from the stored config and copies the weights in.
    pub fn restore(&self) -> Result<HerbsNet> {
        let mut net = self.header.config.build_net(self.header.num_classes)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    pub fn load_into(&self, net: &mut HerbsNet) -> Result<()> {
        let ids: Vec<_> = net.store.ids().collect();
        if ids.len() != self.header.params.len() {
            return Err(HerbsError::Checkpoint(format!(
                "network has {} parameters, checkpoint {}",
                ids.len(),
                self.header.params.len()
            )));
        }
        for ((id, entry), value) in ids.into_iter().zip(&self.header.params).zip(&self.params) {
            let cur = net.store.get(id);
            if net.store.name(id) != entry.name || cur.shape() != entry.shape.as_slice() {
                return Err(HerbsError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    net.store.name(id),
                    cur.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            net.store.set(id, value.clone());
        }
        Ok(())
    }
}
