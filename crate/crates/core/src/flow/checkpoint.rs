use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::params::NamedSlot;
use super::{BatchStats, FlowConfig, FlowModel};
use crate::error::{Error, Result};
use crate::io;

pub const THETA_FILE: &str = "theta.npy";
pub const META_FILE: &str = "model.json";

/// JSON metadata stored beside the flattened parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: u32,
    pub config: FlowConfig,
    pub num_params: usize,
    pub actnorm_initialized: bool,
    pub stats_initialized: bool,
    pub running_stats: Vec<BatchStats>,
    pub param_index: Vec<NamedSlot>,
}

impl FlowModel {
    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            format: 1,
            config: self.config.clone(),
            num_params: self.num_params(),
            actnorm_initialized: self.actnorm_initialized,
            stats_initialized: self.stats_initialized,
            running_stats: self.running.clone(),
            param_index: self.layout.entries().to_vec(),
        }
    }

    /// Writes `theta.npy` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_npy(dir.join(THETA_FILE), &Array1::from(self.theta.clone()))?;
        io::write_json(dir.join(META_FILE), &self.meta())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: ModelMeta = io::read_json(&meta_path)?;
        let mut model = FlowModel::new(meta.config)?;
        if meta.num_params != model.num_params() || meta.param_index != model.layout.entries() {
            return Err(Error::format(
                &meta_path,
                "parameter layout does not match the architecture",
            ));
        }
        let theta: Array1<f64> = io::read_npy(dir.join(THETA_FILE))?;
        model.set_state(
            theta.to_vec(),
            meta.running_stats,
            meta.stats_initialized,
            meta.actnorm_initialized,
        )?;
        Ok(model)
    }
}
