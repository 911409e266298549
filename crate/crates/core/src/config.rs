//! Run configuration: one TOML file with `[data]`, `[sim]`, `[model]`,
//! `[augment]`, `[train]` and `[eval]` sections, overridable from the
//! environment.
//!
//! `CALLIG__TRAIN__STEPS=0` sets `train.steps`; `CALLIG__SEED=3` sets the
//! top-level seed. Values are parsed as TOML literals and fall back to plain
//! strings. `CALLIG_DETERMINISTIC=1` forces `train.deterministic`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::ObservationNoise;
use crate::model::ModelConfig;
use crate::sim::{builtin, generate_demonstration, read_dataset, Demonstration, SimConfig, StyleJitter};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "CALLIG__";
pub const ENV_DETERMINISTIC: &str = "CALLIG_DETERMINISTIC";

/// Where training demonstrations come from: a dataset directory, or
/// generated on the fly from built-in templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub templates: Vec<String>,
    pub demos_per_template: usize,
    /// Apply style jitter to generated demonstrations.
    pub jitter: bool,
    /// Style seed of the first generated demonstration; later ones count up.
    pub first_style_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            templates: vec!["line1".into()],
            demos_per_template: 1,
            jitter: false,
            first_style_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Templates to evaluate; empty means the training templates.
    pub templates: Vec<String>,
    /// Evaluate on jittered demonstrations drawn with this style seed
    /// instead of on the first training demonstration of each template.
    pub held_out_seed: Option<u64>,
    /// Inject training-σ pose noise into rollout observations.
    pub pose_noise: bool,
    /// Inject per-step camera jitter into rollout observations.
    pub image_noise: bool,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for initialization, sampling, augmentation and noise.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, var: &str, path: &[String], raw: &str) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::config(format!("{var}: empty key")))?;
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("{var}: {key} is not a section")))?;
    }
    cur.insert(last.clone(), parse_literal(raw));
    Ok(())
}

fn is_truthy(v: &str) -> bool {
    matches!(v.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "on")
}

impl RunConfig {
    /// Parses `text`, applies overrides from `env`, resolves relative paths
    /// against `base_dir` and validates the result.
    pub fn from_toml_str<I>(text: &str, base_dir: &Path, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        let mut deterministic = false;
        let mut vars: Vec<(String, String)> = env.into_iter().collect();
        vars.sort();
        for (k, v) in vars {
            if k == ENV_DETERMINISTIC {
                deterministic = is_truthy(&v);
            } else if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
                apply_override(&mut table, &k, &path, &v)?;
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        if deterministic {
            cfg.train.deterministic = true;
        }
        if let Some(p) = cfg.data.path.as_mut() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate(self.model.image_height, self.model.image_width)?;
        if [self.model.image_height, self.model.image_width] != [self.sim.image_height, self.sim.image_width] {
            return Err(Error::config(format!(
                "model expects {}×{} images but the simulator renders {}×{}",
                self.model.image_height, self.model.image_width, self.sim.image_height, self.sim.image_width
            )));
        }
        match &self.data.path {
            Some(p) if !p.join("manifest.json").is_file() => {
                return Err(Error::config(format!("dataset {} has no manifest.json", p.display())));
            }
            Some(_) => {}
            None => {
                if self.data.templates.is_empty() || self.data.demos_per_template == 0 {
                    return Err(Error::config("data needs a path or at least one template and demonstration"));
                }
            }
        }
        for t in self.data.templates.iter().chain(&self.eval.templates) {
            builtin(t)?;
        }
        Ok(())
    }

    /// Canonical TOML form, embedded in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Parses a canonical form without environment overrides or path checks.
    pub fn from_canonical(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))
    }

    /// Rollout observation noise requested by the `[eval]` section, at the
    /// training augmentation magnitudes.
    pub fn observation_noise(&self) -> ObservationNoise {
        ObservationNoise {
            pose: self.eval.pose_noise.then(|| self.augment.clone()),
            image: self.eval.image_noise.then(|| self.augment.clone()),
            seed: self.eval.noise_seed,
        }
    }

    /// Training demonstrations: the dataset at `data.path` if set, otherwise
    /// generated from the configured templates.
    pub fn training_demos(&self) -> Result<Vec<Demonstration>> {
        match &self.data.path {
            Some(p) => {
                let (manifest, demos) = read_dataset(p)?;
                if manifest.sim != self.sim {
                    return Err(Error::config(format!(
                        "dataset {} was rendered with different simulator settings",
                        p.display()
                    )));
                }
                Ok(demos)
            }
            None => generate_set(
                &self.data.templates,
                self.data.demos_per_template,
                self.data.first_style_seed,
                self.data.jitter,
                &self.sim,
            ),
        }
    }

    /// Evaluation demonstrations: one per template, either held-out jittered
    /// draws or the first training demonstration of each template.
    pub fn eval_demos(&self, training: &[Demonstration]) -> Result<Vec<Demonstration>> {
        let mut templates = self.eval.templates.clone();
        if templates.is_empty() {
            for d in training {
                if !templates.contains(&d.template_id) {
                    templates.push(d.template_id.clone());
                }
            }
        }
        templates
            .iter()
            .map(|t| match self.eval.held_out_seed {
                Some(seed) => generate_demonstration(&builtin(t)?, seed, StyleJitter::from_config(&self.sim), &self.sim),
                None => match training.iter().find(|d| &d.template_id == t) {
                    Some(d) => Ok(d.clone()),
                    None => generate_demonstration(&builtin(t)?, 0, StyleJitter::NONE, &self.sim),
                },
            })
            .collect()
    }
}

/// `count` demonstrations per template with style seeds
/// `first_seed, first_seed + 1, …`, template-major.
pub fn generate_set(
    templates: &[String],
    count: usize,
    first_seed: u64,
    jitter: bool,
    sim: &SimConfig,
) -> Result<Vec<Demonstration>> {
    let j = if jitter { StyleJitter::from_config(sim) } else { StyleJitter::NONE };
    let mut out = Vec::with_capacity(templates.len() * count);
    for t in templates {
        let template = builtin(t)?;
        for k in 0..count as u64 {
            out.push(generate_demonstration(&template, first_seed.wrapping_add(k), j, sim)?);
        }
    }
    Ok(out)
}
