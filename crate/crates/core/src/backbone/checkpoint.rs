//! Binary checkpoint: 8-byte magic, little-endian u64 header length, JSON
//! header, then every parameter as little-endian f64 in storage order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parameter_plan, BackboneConfig, Model, Vocab};
use crate::error::{Error, Result};
use crate::graph::ItemId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GRCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub backbone: BackboneConfig,
    /// Free-form training settings stored alongside the weights.
    pub extra: serde_json::Value,
    pub vocab: Vec<ItemId>,
    params: Vec<ParamEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<S: Scalar> Model<S> {
    pub fn write_checkpoint(&self, mut w: impl Write, extra: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            backbone: self.config.clone(),
            extra: extra.clone(),
            vocab: self.vocab.items().to_vec(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| ParamEntry { name: n.clone(), shape: [t.rows(), t.cols()] })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.params {
            for v in t.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<(Self, CheckpointHeader)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ckpt_err("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| ckpt_err("header too large"))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;

        let vocab = Vocab::new(header.vocab.iter().copied())?;
        if vocab.len() != header.vocab.len() {
            return Err(ckpt_err("duplicate vocabulary entries"));
        }
        header.backbone.validate()?;
        let (plan, layout) = parameter_plan(&header.backbone, vocab.len());
        if plan.len() != header.params.len() {
            return Err(ckpt_err(format!("expected {} tensors, found {}", plan.len(), header.params.len())));
        }
        let mut names = Vec::with_capacity(plan.len());
        let mut params = Vec::with_capacity(plan.len());
        let mut buf = [0u8; 8];
        for ((name, shape, _), entry) in plan.into_iter().zip(&header.params) {
            if name != entry.name || shape != entry.shape {
                return Err(ckpt_err(format!(
                    "tensor {} {:?} does not match {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let n = shape[0] * shape[1];
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(S::of(f64::from_le_bytes(buf)));
            }
            names.push(name);
            params.push(Tensor::from_vec(shape.to_vec(), data)?.with_grad());
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ckpt_err(format!("{} trailing bytes", rest.len())));
        }
        let model = Model { config: header.backbone.clone(), vocab, names, params, layout };
        Ok((model, header))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &serde_json::Value) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?), extra)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointHeader)> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}
