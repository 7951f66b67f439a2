//! JSON model files.

use std::fs;
use std::path::Path;

use cdl_core::features::FeatureMode;
use cdl_core::matrix::Matrix;
use cdl_core::network::{Activation, Layer, MiForm, NetworkParams, Objective, TrainConfig};
use cdl_core::registration::CdlModel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub alpha: f64,
    pub beta: f64,
    pub mi_form: String,
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub init_scale: Option<f64>,
}

impl From<&TrainConfig> for TrainRecord {
    fn from(c: &TrainConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            mi_form: c.mi_form.name().into(),
            learning_rate: c.learning_rate,
            decay: c.decay,
            eps: c.eps,
            max_iters: c.max_iters,
            seed: c.seed,
            init_scale: c.init_scale,
        }
    }
}

/// Where the training batch came from and how training ended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Manifest file name, relative to the output directory.
    pub manifest: String,
    pub pairs: Vec<String>,
    pub samples_per_pair: usize,
    pub sample_seed: u64,
    pub normalization: String,
    pub iterations: usize,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub activation: String,
    pub features: String,
    /// `[p0, p1, ..., pM]`.
    pub dims: Vec<usize>,
    /// Per layer, `p_m x p_{m-1}` row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub train_config: TrainRecord,
    pub data_provenance: Provenance,
}

impl ModelFile {
    pub fn new(model: &CdlModel, cfg: &TrainConfig, provenance: Provenance) -> Self {
        let p = &model.params;
        Self {
            version: MODEL_VERSION,
            activation: p.activation().name().into(),
            features: model.features.name().into(),
            dims: p.dims(),
            weights: p.layers().iter().map(|l| l.weights.as_slice().to_vec()).collect(),
            biases: p.layers().iter().map(|l| l.bias.clone()).collect(),
            train_config: cfg.into(),
            data_provenance: provenance,
        }
    }

    /// Checks the version and the `dims` chain, then rebuilds the model.
    pub fn to_model(&self, path: &Path) -> Result<CdlModel> {
        let bad = |msg: String| Error::format(path, msg);
        if self.version != MODEL_VERSION {
            return Err(bad(format!("unsupported model version {}", self.version)));
        }
        let activation = Activation::parse(&self.activation).ok_or_else(|| bad(format!("unknown activation `{}`", self.activation)))?;
        let features = FeatureMode::parse(&self.features).ok_or_else(|| bad(format!("unknown feature mode `{}`", self.features)))?;
        let mi_form = MiForm::parse(&self.train_config.mi_form)
            .ok_or_else(|| bad(format!("unknown mi_form `{}`", self.train_config.mi_form)))?;
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(bad(format!("dims {:?} must list at least two positive widths", self.dims)));
        }
        let depth = self.dims.len() - 1;
        if self.weights.len() != depth || self.biases.len() != depth {
            return Err(bad(format!("dims {:?} describe {depth} layers but the file has {} weight and {} bias arrays", self.dims, self.weights.len(), self.biases.len())));
        }
        let mut layers = Vec::with_capacity(depth);
        for m in 0..depth {
            let (rows, cols) = (self.dims[m + 1], self.dims[m]);
            if self.weights[m].len() != rows * cols || self.biases[m].len() != rows {
                return Err(bad(format!("layer {} does not match {cols} -> {rows}", m + 1)));
            }
            if !self.weights[m].iter().chain(&self.biases[m]).all(|v| v.is_finite()) {
                return Err(bad(format!("layer {} has non-finite parameters", m + 1)));
            }
            layers.push(Layer { weights: Matrix::from_vec(rows, cols, self.weights[m].clone())?, bias: self.biases[m].clone() });
        }
        let params = NetworkParams::new(layers, activation)?;
        let t = &self.train_config;
        let objective = Objective { alpha: t.alpha, beta: t.beta, mi_form };
        Ok(CdlModel::new(params, objective, features)?)
    }
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model_file(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_model(path: &Path) -> Result<CdlModel> {
    load_model_file(path)?.to_model(path)
}
