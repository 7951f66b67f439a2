//! Flat `key = value` run configuration.
//!
//! Values are read as JSON literals when they parse as one (numbers, `true`,
//! `null`, quoted strings) and as bare strings otherwise. An empty value means
//! unset. Keys not listed in [`RunConfig`] are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use cdl_core::features::FeatureMode;
use cdl_core::network::{Activation, MiForm, TrainConfig};
use cdl_core::registration::{OptimizerConfig, RegistrationConfig, DEFAULT_BINS, DEFAULT_PARAM_SCALING};
use cdl_core::synthetic::DriftSpec;
use cdl_core::transform::TransformMode;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    pub out: String,

    pub grid_size: usize,
    pub spacing_mm: f64,
    pub n_train_pairs: usize,
    pub n_test_pairs: usize,
    pub drift: String,
    /// `random-rigid` or `one-rotation`.
    pub perturbation: String,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,

    /// Defaults to `<out>/manifest.csv`.
    pub manifest: Option<String>,
    /// Hidden and output widths, comma separated.
    pub layers: String,
    pub activation: String,
    pub mi_form: String,
    pub features: String,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
    pub train_iters: usize,
    /// Total training samples, split evenly over the training pairs.
    pub train_samples: usize,
    pub init_scale: Option<f64>,

    /// Defaults to `<out>/model.json`.
    pub model: Option<String>,
    /// Comma separated subset of `cdl`, `mi`, `mi+m`, `mi+b`.
    pub methods: String,
    pub target: Option<String>,
    pub source: Option<String>,
    pub target_mask: Option<String>,
    /// Ground-truth transform; with `target_mask` it enables per-iteration Dice.
    pub truth: Option<String>,
    /// Mask for `mi+m` in single-pair mode.
    pub mask: Option<String>,
    pub bins: usize,
    pub mode: String,
    pub samples: usize,
    pub resample_each_iter: bool,
    pub max_iters: usize,
    pub base_step: f64,
    pub step_unit_mm: f64,
    pub stop_tol: f64,
    pub fd_step: f64,
    /// Percentile-normalise inputs that are not already in `[0, 1]`.
    pub normalize: bool,
    pub lo_pct: f64,
    pub hi_pct: f64,

    /// Defaults to `<out>/results`.
    pub results: Option<String>,

    pub density_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = OptimizerConfig::default();
        Self {
            seed: 0,
            threads: 0,
            out: "out".into(),
            grid_size: 48,
            spacing_mm: 2.5,
            n_train_pairs: 10,
            n_test_pairs: 10,
            drift: "t1-t2".into(),
            perturbation: "random-rigid".into(),
            max_rotation_deg: 10.0,
            max_translation_mm: 10.0,
            manifest: None,
            layers: "16,8".into(),
            activation: Activation::default().name().into(),
            mi_form: MiForm::default().name().into(),
            features: FeatureMode::default().name().into(),
            alpha: t.alpha,
            beta: t.beta,
            learning_rate: t.learning_rate,
            decay: t.decay,
            eps: t.eps,
            train_iters: t.max_iters,
            train_samples: 20_000,
            init_scale: None,
            model: None,
            methods: "cdl".into(),
            target: None,
            source: None,
            target_mask: None,
            truth: None,
            mask: None,
            bins: DEFAULT_BINS,
            mode: TransformMode::default().name().into(),
            samples: RegistrationConfig::default().samples,
            resample_each_iter: false,
            max_iters: o.max_iters,
            base_step: o.base_step,
            step_unit_mm: o.step_unit_mm,
            stop_tol: o.stop_tol,
            fd_step: o.fd_step,
            normalize: false,
            lo_pct: cdl_core::volume::DEFAULT_LO_PERCENTILE,
            hi_pct: cdl_core::volume::DEFAULT_HI_PERCENTILE,
            results: None,
            density_samples: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Cdl,
    Mi,
    MiThreshold,
    MiBrain,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cdl => "cdl",
            Method::Mi => "mi",
            Method::MiThreshold => "mi+m",
            Method::MiBrain => "mi+b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cdl" => Some(Method::Cdl),
            "mi" => Some(Method::Mi),
            "mi+m" => Some(Method::MiThreshold),
            "mi+b" => Some(Method::MiBrain),
            _ => None,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.is_empty() {
        return Value::Null;
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Result<Self> {
        let mut map = Map::new();
        for (k, v) in pairs {
            let value = parse_value(&v);
            if value.is_null() {
                map.remove(&k);
                if !Self::keys().contains(&k) {
                    return Err(Error::Config(format!("unknown key `{k}`")));
                }
                continue;
            }
            map.insert(k, value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any), then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(pairs)
    }

    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Every key, sorted, with its resolved value.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else { unreachable!("config serialises to an object") };
        let mut s = String::new();
        for (k, v) in map {
            let text = match &v {
                Value::Null => String::new(),
                Value::String(x) if matches!(parse_value(x), Value::String(_)) => x.clone(),
                other => other.to_string(),
            };
            s += &format!("{k} = {text}\n");
        }
        s
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_size < 8 {
            return bad(format!("grid_size must be at least 8, got {}", self.grid_size));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad("spacing_mm must be positive".into());
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation_mm >= 0.0) {
            return bad("perturbation bounds must be non-negative".into());
        }
        if !matches!(self.perturbation.as_str(), "random-rigid" | "one-rotation") {
            return bad(format!("unknown perturbation `{}`", self.perturbation));
        }
        if !(0.0 <= self.lo_pct && self.lo_pct < self.hi_pct && self.hi_pct <= 100.0) {
            return bad("need 0 <= lo_pct < hi_pct <= 100".into());
        }
        if self.train_samples == 0 || self.samples == 0 {
            return bad("train_samples and samples must be positive".into());
        }
        if self.density_samples < cdl_core::density::MIN_GAUSSIANITY_SAMPLES {
            return bad(format!("density_samples must be at least {}", cdl_core::density::MIN_GAUSSIANITY_SAMPLES));
        }
        self.drift_spec()?;
        self.arch()?;
        self.activation()?;
        self.feature_mode()?;
        self.train_config()?.validate()?;
        self.registration_config()?.optimizer.validate()?;
        self.methods()?;
        if self.bins < 2 {
            return bad("bins must be at least 2".into());
        }
        Ok(())
    }

    pub fn drift_spec(&self) -> Result<DriftSpec> {
        DriftSpec::preset(&self.drift).ok_or_else(|| Error::Config(format!("unknown drift preset `{}`", self.drift)))
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation).ok_or_else(|| Error::Config(format!("unknown activation `{}`", self.activation)))
    }

    pub fn feature_mode(&self) -> Result<FeatureMode> {
        FeatureMode::parse(&self.features).ok_or_else(|| Error::Config(format!("unknown feature mode `{}`", self.features)))
    }

    /// Full layer widths, input first.
    pub fn arch(&self) -> Result<Vec<usize>> {
        let mut arch = vec![self.feature_mode()?.dim()];
        for w in self.layers.split(',') {
            match w.trim().parse::<usize>() {
                Ok(n) if n > 0 => arch.push(n),
                _ => return Err(Error::Config(format!("bad layer width `{w}` in `{}`", self.layers))),
            }
        }
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            mi_form: MiForm::parse(&self.mi_form).ok_or_else(|| Error::Config(format!("unknown mi_form `{}`", self.mi_form)))?,
            learning_rate: self.learning_rate,
            decay: self.decay,
            eps: self.eps,
            max_iters: self.train_iters,
            seed: self.seed,
            init_scale: self.init_scale,
        })
    }

    pub fn registration_config(&self) -> Result<RegistrationConfig> {
        Ok(RegistrationConfig {
            mode: TransformMode::parse(&self.mode).ok_or_else(|| Error::Config(format!("unknown mode `{}`", self.mode)))?,
            samples: self.samples,
            resample_each_iter: self.resample_each_iter,
            optimizer: OptimizerConfig {
                max_iters: self.max_iters,
                base_step: self.base_step,
                step_unit_mm: self.step_unit_mm,
                param_scaling: DEFAULT_PARAM_SCALING,
                stop_tol: self.stop_tol,
                fd_step: self.fd_step,
            },
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for m in self.methods.split(',') {
            let m = Method::parse(m.trim()).ok_or_else(|| Error::Config(format!("unknown method `{m}`")))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.as_ref().map(PathBuf::from).unwrap_or_else(|| self.out_dir().join("manifest.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.as_ref().map(PathBuf::from).unwrap_or_else(|| self.out_dir().join("model.json"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.results.as_ref().map(PathBuf::from).unwrap_or_else(|| self.out_dir().join("results"))
    }
}
