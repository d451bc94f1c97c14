//! Single-file checkpoints in the safetensors format.
//!
//! Parameter arrays are stored under their hierarchical names
//! (`backbone.enc.1.conv1.weight`, `fsp.3.cff.fuse.bn.gamma`, `head.edge.bias`,
//! ...), optimizer slots under `optim.<param>.<slot>`. The model
//! configuration, optimizer settings, preprocessing parameters and training
//! progress live in the header metadata as JSON strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cf2Net, ModelConfig};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore, Tensor};
use crate::superpixel::SlicParams;

pub const FORMAT: &str = "cf2net-checkpoint/1";

/// Training progress recorded with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub fold: Option<usize>,
    /// Fold count of the split `fold` refers to.
    pub folds: Option<usize>,
    pub seed: u64,
    /// Validation DSC at this epoch, when measured.
    pub val_dsc: Option<f64>,
    /// `best` or `final`.
    pub tag: String,
}

/// Everything except the parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub model: ModelConfig,
    /// Region-mean channel parameters used when the model was trained.
    pub superpixel: Option<SlicParams>,
    pub optimizer: Option<OptimizerConfig>,
    pub optimizer_steps: u64,
    pub progress: Progress,
}

pub struct Checkpoint {
    pub info: CheckpointInfo,
    pub net: Cf2Net,
    pub store: ParamStore,
    pub optimizer: Option<Optimizer>,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!(
            "{name}: expected f32, found {:?}",
            view.dtype()
        )));
    }
    let shape: [usize; 4] = view.shape().try_into().map_err(|_| {
        Error::Checkpoint(format!(
            "{name}: expected a 4-D array, found {:?}",
            view.shape()
        ))
    })?;
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Serialize parameters, optional optimizer state and metadata.
pub fn to_bytes_checkpoint(
    info: &CheckpointInfo,
    store: &ParamStore,
    optimizer: Option<&Optimizer>,
) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, [usize; 4], Vec<u8>)> = store
        .ids()
        .map(|id| {
            let t = store.get(id);
            (store.name(id).to_string(), t.shape(), to_bytes(t))
        })
        .collect();
    if let Some(opt) = optimizer {
        arrays.extend(
            opt.state_tensors(store)
                .into_iter()
                .map(|(n, t)| (n, t.shape(), to_bytes(&t))),
        );
    }
    let views = arrays
        .iter()
        .map(|(n, s, b)| {
            Ok((
                n.as_str(),
                TensorView::new(Dtype::F32, s.to_vec(), b)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("info".to_string(), serde_json::to_string(info)?);
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(
    path: &Path,
    info: &CheckpointInfo,
    store: &ParamStore,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let bytes = to_bytes_checkpoint(info, store, optimizer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rebuild the network from the stored configuration and fill every
/// parameter; names and shapes must match exactly.
pub fn from_bytes_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    match meta.get("format") {
        Some(f) if f == FORMAT => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {other:?}"
            )))
        }
    }
    let info: CheckpointInfo = serde_json::from_str(
        meta.get("info")
            .ok_or_else(|| Error::Checkpoint("missing checkpoint info".into()))?,
    )?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (net, mut store) = Cf2Net::build(&info.model, 0)?;
    let mut optim_state = BTreeMap::new();
    let mut seen = 0usize;
    for (name, view) in tensors.tensors() {
        let t = from_view(&name, &view)?;
        if name.starts_with("optim.") {
            optim_state.insert(name, t);
            continue;
        }
        let id = store.lookup(&name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "unexpected parameter {name} for this configuration"
            ))
        })?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
        seen += 1;
    }
    if seen != store.len() {
        let missing: Vec<&str> = store
            .names()
            .filter(|n| tensors.tensor(n).is_err())
            .take(5)
            .collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks parameters, e.g. {missing:?}"
        )));
    }
    let optimizer = match &info.optimizer {
        Some(cfg) => Some(Optimizer::restore(
            cfg.clone(),
            info.optimizer_steps,
            &store,
            &optim_state,
        )?),
        None => None,
    };
    Ok(Checkpoint {
        info,
        net,
        store,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            em_channels: 4,
            ..ModelConfig::desk(2, 16)
        }
    }

    #[test]
    fn round_trip_restores_every_array_bit_for_bit() {
        let (_, store) = Cf2Net::build(&tiny(), 7).unwrap();
        let info = CheckpointInfo {
            model: tiny(),
            superpixel: Some(SlicParams::default()),
            optimizer: Some(OptimizerConfig::default()),
            optimizer_steps: 3,
            progress: Progress {
                epoch: 2,
                tag: "best".into(),
                ..Progress::default()
            },
        };
        let opt = Optimizer::new(OptimizerConfig::default());
        let bytes = to_bytes_checkpoint(&info, &store, Some(&opt)).unwrap();
        let ck = from_bytes_checkpoint(&bytes).unwrap();
        assert_eq!(ck.info, info);
        assert_eq!(ck.store.len(), store.len());
        for id in store.ids() {
            let other = ck.store.lookup(store.name(id)).unwrap();
            let a: Vec<u32> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = ck
                .store
                .get(other)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b, "{}", store.name(id));
        }
        assert_eq!(ck.optimizer.unwrap().steps(), 3);
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let (_, store) = Cf2Net::build(&tiny(), 7).unwrap();
        let info = CheckpointInfo {
            model: ModelConfig {
                base_width: 4,
                ..tiny()
            },
            superpixel: None,
            optimizer: None,
            optimizer_steps: 0,
            progress: Progress::default(),
        };
        let bytes = to_bytes_checkpoint(&info, &store, None).unwrap();
        let err = from_bytes_checkpoint(&bytes).err().unwrap().to_string();
        assert!(err.contains("shape"), "{err}");
        assert!(from_bytes_checkpoint(b"garbage").is_err());
    }
}
