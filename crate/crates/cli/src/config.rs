//! Experiment configuration files.

use std::path::{Path, PathBuf};

use mziforge::experiments::{LayerSelector, PstarGrid, SigmaMode};
use mziforge::imperfect::{ImperfectionParameterSet, QuantMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Rvd,
    Loss,
    Quant,
    Sal,
    Aal,
    Pstar,
    ToyTrain,
    Decompose,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
            Experiment::Rvd => "rvd",
            Experiment::Loss => "loss",
            Experiment::Quant => "quant",
            Experiment::Sal => "sal",
            Experiment::Aal => "aal",
            Experiment::Pstar => "pstar",
            Experiment::ToyTrain => "toy-train",
            Experiment::Decompose => "decompose",
        }
    }

    /// Keys this experiment reads, beyond the common ones.
    fn keys(self) -> &'static [&'static str] {
        match self {
            Experiment::Exp1 => &["model", "dataset", "sigmas", "mode", "n_mc"],
            Experiment::Exp2 => &["model", "dataset", "sigma_in", "sigma_out", "n_mc"],
            Experiment::Exp3 => &["model", "dataset", "sigmas", "corr_lens", "radial", "mode", "n_mc"],
            Experiment::Rvd => &["unitary", "sigma_phs", "sigma_bes", "n_mc"],
            Experiment::Loss => &["model", "dataset", "mu_il", "sigma_il", "layers", "n_mc"],
            Experiment::Quant => &["model", "dataset", "modes", "n_bits", "layers"],
            Experiment::Sal | Experiment::Aal => &["model", "dataset", "params", "n_p"],
            Experiment::Pstar => &["model", "dataset", "grid", "alpha_max", "params", "n_p"],
            Experiment::ToyTrain => &["model", "dataset", "shapes", "steps", "learning_rate"],
            Experiment::Decompose => &["unitary"],
        }
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            Experiment::Exp1 => &["model", "sigmas"],
            Experiment::Exp2 => &["model", "sigma_in", "sigma_out"],
            Experiment::Exp3 => &["model", "sigmas", "corr_lens"],
            Experiment::Rvd | Experiment::Decompose => &["unitary"],
            Experiment::Loss => &["model", "mu_il", "sigma_il"],
            Experiment::Quant => &["model", "n_bits"],
            Experiment::Sal | Experiment::Aal => &["model", "params"],
            Experiment::Pstar => &["model", "grid", "alpha_max"],
            Experiment::ToyTrain => &["shapes"],
        }
    }
}

const COMMON_KEYS: &[&str] = &["experiment", "seed", "output_dir", "threads"];

/// Where the model (and its evaluation data) comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSource {
    /// Identity-weight classifier on scaled basis vectors.
    Toy {
        classes: usize,
        #[serde(default = "one")]
        depth: usize,
    },
    /// Random layers with self-labelled random inputs.
    Teacher {
        classes: usize,
        #[serde(default = "one")]
        depth: usize,
        samples: usize,
        seed: u64,
    },
    /// Weight file; needs a `dataset` file alongside.
    Weights { path: PathBuf },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_mc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigmas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SigmaMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr_lens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radial: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_out: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unitary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_phs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_bes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_il: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_il: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<LayerSelector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<QuantMode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bits: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ImperfectionParameterSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PstarGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

pub const DEFAULT_N_MC: usize = 200;
pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;

impl Config {
    /// Parses and validates; errors carry line/column or field names.
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let value = serde_json::to_value(self).map_err(|e| e.to_string())?;
        let present: Vec<&str> = value
            .as_object()
            .into_iter()
            .flat_map(|m| m.keys())
            .map(String::as_str)
            .collect();
        let exp = self.experiment;
        for key in &present {
            if !COMMON_KEYS.contains(key) && !exp.keys().contains(key) {
                return Err(format!("field `{key}` is not used by experiment `{}`", exp.name()));
            }
        }
        for key in exp.required() {
            if !present.contains(key) {
                return Err(format!("experiment `{}` requires field `{key}`", exp.name()));
            }
        }
        if exp == Experiment::ToyTrain && self.model.is_none() && self.dataset.is_none() {
            return Err("experiment `toy-train` requires field `model` or `dataset`".into());
        }
        match (&self.model, &self.dataset) {
            (Some(ModelSource::Weights { .. }), None) if exp != Experiment::ToyTrain => {
                return Err("field `dataset` is required with a weights model".into())
            }
            (Some(ModelSource::Toy { .. } | ModelSource::Teacher { .. }), Some(_)) => {
                return Err("field `dataset` cannot be combined with a toy or teacher model".into())
            }
            (Some(ModelSource::Weights { .. }), _) if exp == Experiment::ToyTrain => {
                return Err(
                    "field `model`: toy-train trains from scratch; use a toy or teacher model or a dataset".into(),
                )
            }
            _ => {}
        }
        if let Some(ModelSource::Toy { classes, depth } | ModelSource::Teacher { classes, depth, .. }) = &self.model {
            if !(2..=16).contains(classes) {
                return Err(format!("field `model.classes` must be in 2..=16, got {classes}"));
            }
            if *depth == 0 {
                return Err("field `model.depth` must be at least 1".into());
            }
        }
        if let Some(ModelSource::Teacher { samples: 0, .. }) = &self.model {
            return Err("field `model.samples` must be positive".into());
        }
        positive(self.threads, "threads")?;
        positive(self.n_mc, "n_mc")?;
        positive(self.n_p, "n_p")?;
        non_empty(&self.sigmas, "sigmas")?;
        non_empty(&self.corr_lens, "corr_lens")?;
        non_empty(&self.mu_il, "mu_il")?;
        non_empty(&self.sigma_il, "sigma_il")?;
        non_empty(&self.modes, "modes")?;
        non_empty(&self.n_bits, "n_bits")?;
        non_empty(&self.shapes, "shapes")?;
        for (name, list) in [("sigmas", &self.sigmas), ("sigma_il", &self.sigma_il)] {
            if let Some(v) = list.iter().flatten().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(format!(
                    "field `{name}`: values must be finite and non-negative, got {v}"
                ));
            }
        }
        if let Some(l) = self.corr_lens.iter().flatten().find(|l| **l == 0) {
            return Err(format!(
                "field `corr_lens`: correlation lengths must be at least 1, got {l}"
            ));
        }
        if let Some(b) = self
            .n_bits
            .iter()
            .flatten()
            .find(|b| !(1..=mziforge::imperfect::MAX_BITS).contains(*b))
        {
            return Err(format!(
                "field `n_bits`: {b} is outside 1..={}",
                mziforge::imperfect::MAX_BITS
            ));
        }
        for (name, v) in [
            ("sigma_in", self.sigma_in),
            ("sigma_out", self.sigma_out),
            ("sigma_phs", self.sigma_phs),
            ("sigma_bes", self.sigma_bes),
        ] {
            if let Some(v) = v.filter(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(format!("field `{name}` must be finite and non-negative, got {v}"));
            }
        }
        if let Some(a) = self.alpha_max.filter(|a| !(0.0..=1.0).contains(a)) {
            return Err(format!("field `alpha_max` must lie in [0, 1], got {a}"));
        }
        if let Some(r) = self.learning_rate.filter(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(format!("field `learning_rate` must be positive, got {r}"));
        }
        if let Some(p) = &self.params {
            p.validate().map_err(|e| format!("field `params`: {e}"))?;
        }
        Ok(())
    }

    /// Resolves relative paths against `base`, so the echoed config is
    /// self-contained.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.dataset.as_mut().map(fix);
        self.unitary.as_mut().map(fix);
        if let Some(ModelSource::Weights { path }) = &mut self.model {
            fix(path);
        }
    }
}

fn positive(v: Option<usize>, name: &str) -> Result<(), String> {
    match v {
        Some(0) => Err(format!("field `{name}` must be positive")),
        _ => Ok(()),
    }
}

fn non_empty<T>(v: &Option<Vec<T>>, name: &str) -> Result<(), String> {
    match v {
        Some(list) if list.is_empty() => Err(format!("field `{name}` must not be empty")),
        _ => Ok(()),
    }
}
