//! Weight checkpoint: a single-file archive of named f64 tensors behind a
//! JSON header carrying the architecture, anchors, and resolved config.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::diffnet::{AnchorSet, DiffNet, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HMCDCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model: ModelConfig,
    anchors: AnchorSet,
    /// Fully-resolved run configuration, echoed for provenance.
    config_echo: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint, not yet bound to a network.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub anchors: AnchorSet,
    pub config_echo: serde_json::Value,
    tensors: Vec<(String, ArrayD<f64>)>,
}

/// Write the model's parameters with the architecture header.
pub fn save_checkpoint(
    path: &Path,
    net: &DiffNet,
    anchors: &AnchorSet,
    config_echo: serde_json::Value,
) -> Result<()> {
    let header = Header {
        schema_version: crate::CHECKPOINT_SCHEMA_VERSION,
        model: net.cfg.clone(),
        anchors: anchors.clone(),
        config_echo,
        tensors: net
            .params
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&crate::CHECKPOINT_SCHEMA_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in net.params.iter() {
        for v in t.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?} is not a checkpoint")));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != crate::CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {version} (expected {})",
            crate::CHECKPOINT_SCHEMA_VERSION
        )));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", meta.name)))?;
        tensors.push((meta.name.clone(), t));
    }
    Ok(Checkpoint {
        model: header.model,
        anchors: header.anchors,
        config_echo: header.config_echo,
        tensors,
    })
}

impl Checkpoint {
    /// Rebuild the network exactly as checkpointed.
    pub fn build_net(&self) -> Result<DiffNet> {
        let mut net = DiffNet::new(self.model.clone(), 0)?;
        self.apply_strict(&mut net)?;
        Ok(net)
    }

    /// Copy every tensor into a freshly built network, requiring an exact
    /// name/shape match.
    pub fn apply_strict(&self, net: &mut DiffNet) -> Result<()> {
        if net.cfg != self.model {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint preset {:?} (input {}), network preset {:?} (input {})",
                self.model.preset, self.model.input_size, net.cfg.preset, net.cfg.input_size
            )));
        }
        self.apply_by_name(net, true)
    }

    /// Copy tensors by name, optionally requiring full coverage. With
    /// `strict = false` this initializes a temporal model from a single-frame
    /// checkpoint (the ConvLSTM parameters keep their fresh init).
    pub fn apply_by_name(&self, net: &mut DiffNet, strict: bool) -> Result<()> {
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut used = 0usize;
        for (idx, name) in names.iter().enumerate() {
            if let Some((_, t)) = self.tensors.iter().find(|(n, _)| n == name) {
                let dst = net.params.get_mut(crate::nn::ParamId(idx));
                if dst.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: checkpoint shape {:?} vs network {:?} (preset {:?} vs {:?})",
                        t.shape(),
                        dst.shape(),
                        self.model.preset,
                        net.cfg.preset
                    )));
                }
                dst.assign(t);
                used += 1;
            } else if strict {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} missing from checkpoint (preset {:?} vs {:?})",
                    self.model.preset, net.cfg.preset
                )));
            }
        }
        if strict && used != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint carries {} tensors, network consumed {used} (preset {:?} vs {:?})",
                self.tensors.len(),
                self.model.preset,
                net.cfg.preset
            )));
        }
        Ok(())
    }
}
