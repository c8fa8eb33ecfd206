//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use melodapt::adaptation::{MetaHyperparameters, Selection};
use melodapt::model::Architecture;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "paper".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    pub learning_rate: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub k: usize,
    pub inner_steps: usize,
    pub iterations: usize,
    pub inner_lr: f32,
    pub outer_lr: f32,
    pub lambda: f64,
    pub delta_cap: f64,
    pub epochs: usize,
    pub meta_weighting: bool,
    pub selection: Selection,
}

impl Default for MetaSection {
    fn default() -> Self {
        let h = MetaHyperparameters::default();
        Self {
            k: h.k,
            inner_steps: h.inner_steps,
            iterations: h.iterations,
            inner_lr: h.inner_lr,
            outer_lr: h.outer_lr,
            lambda: h.lambda,
            delta_cap: h.delta_cap,
            epochs: h.epochs,
            meta_weighting: h.meta_weighting,
            selection: h.selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, jobs: 1 }
    }
}

/// Which manifest domain each stage reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub pretrain_domain: String,
    pub meta_domain: String,
    pub target_domain: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            pretrain_domain: "source".into(),
            meta_domain: "meta".into(),
            target_domain: "target".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub pretrain: StageSection,
    pub confidence: StageSection,
    pub meta: MetaSection,
    pub run: RunSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            pretrain: StageSection {
                epochs: 450,
                learning_rate: 1e-5,
            },
            confidence: StageSection {
                epochs: 200,
                learning_rate: 1e-5,
            },
            meta: MetaSection::default(),
            run: RunSection::default(),
            data: DataSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Overlay `top` onto `base`, descending into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `path` when given. Missing sections and keys
    /// keep their defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(format!("config {}: {e}", path.display())))?;
        let bad = |e: &dyn std::fmt::Display| CliError::config(format!("{}: {e}", path.display()));
        let user: toml::Table = toml::from_str(&text).map_err(|e| bad(&e.message()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| bad(&e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.architecture()?;
        self.hyperparameters()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        for (name, s) in [("pretrain", &self.pretrain), ("confidence", &self.confidence)] {
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(CliError::config(format!("{name}.learning_rate must be positive")));
            }
        }
        if self.run.jobs == 0 {
            return Err(CliError::config("run.jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        Architecture::preset(&self.model.preset)
            .ok_or_else(|| CliError::config(format!("unknown model preset {:?}; use paper or desk", self.model.preset)))
    }

    pub fn hyperparameters(&self) -> MetaHyperparameters {
        let m = &self.meta;
        MetaHyperparameters {
            k: m.k,
            inner_steps: m.inner_steps,
            iterations: m.iterations,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            lambda: m.lambda,
            delta_cap: m.delta_cap,
            epochs: m.epochs,
            meta_weighting: m.meta_weighting,
            selection: m.selection,
            seed: self.run.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
