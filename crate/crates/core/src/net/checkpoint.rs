//! Model checkpoints: `manifest.json` plus one tensor file per parameter group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, Network};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub seed: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(net: &Network, seed: u64, train: Option<TrainConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    let mut result = Ok(());
    net.visit_params(&mut |name, _, p| {
        let file = format!("{name}.tensor");
        if result.is_ok() {
            result = Tensor::new(vec![p.len()], p.to_vec()).and_then(|t| save_tensor(&t, dir.join(&file)));
        }
        params.push(ParamEntry {
            name: name.to_string(),
            file,
            len: p.len(),
        });
    });
    result?;
    let manifest = CheckpointManifest {
        architecture: net.architecture().clone(),
        seed,
        train,
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut net = Network::new(&manifest.architecture, manifest.seed)?;
    let names = net.param_names();
    if names.len() != manifest.params.len() || names.iter().zip(&manifest.params).any(|(n, e)| *n != e.name) {
        return Err(Error::Format("checkpoint parameters do not match the architecture".into()));
    }
    let groups = manifest
        .params
        .iter()
        .map(|e| load_tensor(dir.join(&e.file)).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    net.set_params(&groups)?;
    Ok((net, manifest))
}
