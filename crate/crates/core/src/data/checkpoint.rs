//! Model + optimizer checkpoints.
//!
//! ```text
//! MSCK1\n
//! {"config_hash":..., "config":{...}, "epoch":..., "val_kappa":..., "entries":[...], "optimizer":{...}}\n
//! <f64 LE: every store entry in order, then m and v of each tracked param>
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MscgcKanModel};
use crate::params::{EntryKind, ParamId};
use crate::train::AdamW;

pub const MAGIC: &[u8] = b"MSCK1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Store indices that carry moment buffers.
    pub tracked: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub val_kappa: Option<f64>,
    pub entries: Vec<EntryInfo>,
    pub optimizer: Option<OptimizerInfo>,
}

pub fn save_checkpoint(path: &Path, model: &MscgcKanModel, opt: Option<&AdamW>, epoch: usize, val_kappa: Option<f64>) -> Result<()> {
    let entries = model
        .store
        .entries()
        .map(|(_, e)| EntryInfo { name: e.name.clone(), kind: e.kind, shape: e.tensor.shape().to_vec() })
        .collect();
    let optimizer = opt.map(|o| OptimizerInfo {
        step: o.step,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        tracked: o.tracked().iter().map(|id| id.index()).collect(),
    });
    let header = CheckpointHeader {
        config_hash: model.config.hash(),
        config: model.config.clone(),
        epoch,
        val_kappa,
        entries,
        optimizer,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, e) in model.store.entries() {
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(o) = opt {
            for id in o.tracked() {
                let (m, v) = o.moments(id).expect("tracked ids have moments");
                for x in m.iter().chain(v) {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"MSCK1\""));
    }
    let start = MAGIC.len();
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::format(start as u64, "unterminated checkpoint header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[start..end])
        .map_err(|e| Error::format(start as u64, format!("bad checkpoint header: {e}")))?;
    Ok((header, end + 1))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(parse(&fs::read(path)?)?.0)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8;
        if self.bytes.len() - self.pos < need {
            return Err(Error::format(self.bytes.len() as u64, "truncated checkpoint payload"));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }
}

/// Restores `model` (and `opt`, when given) from `path`. The embedded
/// config hash must match the model's.
pub fn load_checkpoint(path: &Path, model: &mut MscgcKanModel, opt: Option<&mut AdamW>) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    let (header, payload) = parse(&bytes)?;
    let own = model.config.hash();
    if header.config_hash != own {
        return Err(Error::Compatibility(format!(
            "checkpoint config hash {} does not match model config hash {own}",
            header.config_hash
        )));
    }
    if header.entries.len() != model.store.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} entries, model has {}",
            header.entries.len(),
            model.store.len()
        )));
    }
    for (info, (_, e)) in header.entries.iter().zip(model.store.entries()) {
        if info.name != e.name || info.shape != e.tensor.shape() {
            return Err(Error::Compatibility(format!(
                "checkpoint entry {} {:?} does not match model entry {} {:?}",
                info.name,
                info.shape,
                e.name,
                e.tensor.shape()
            )));
        }
    }
    let mut cur = Cursor { bytes: &bytes, pos: payload };
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut values = Vec::with_capacity(ids.len());
    for &id in &ids {
        values.push(cur.take(model.store.get(id).numel())?);
    }
    let mut restored = None;
    if let Some(info) = &header.optimizer {
        let mut o = AdamW::new((info.beta1, info.beta2), info.eps);
        o.step = info.step;
        for &i in &info.tracked {
            let id = *ids.get(i).ok_or_else(|| Error::Compatibility(format!("optimizer tracks unknown entry {i}")))?;
            let n = model.store.get(id).numel();
            let m = cur.take(n)?;
            let v = cur.take(n)?;
            o.set_moments(id, m, v);
        }
        restored = Some(o);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after checkpoint payload"));
    }
    for (id, v) in ids.into_iter().zip(values) {
        model.store.assign(id, &v)?;
    }
    if let Some(target) = opt {
        match restored {
            Some(o) => *target = o,
            None => return Err(Error::Compatibility("checkpoint carries no optimizer state".into())),
        }
    }
    Ok(header)
}

/// Builds a model from the embedded config and loads its weights.
pub fn model_from_checkpoint(path: &Path) -> Result<(MscgcKanModel, CheckpointHeader)> {
    let header = read_checkpoint_header(path)?;
    let config: ModelConfig = header.config.clone();
    let mut model = MscgcKanModel::new(config)?;
    let header = load_checkpoint(path, &mut model, None)?;
    Ok((model, header))
}
