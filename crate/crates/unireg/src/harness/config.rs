//! Flat `key = value` experiment configuration with a typed schema.
//! Every key is declared once, carries a default, and is scoped to the
//! experiments it applies to; unknown or out-of-scope keys are hard errors.

use std::collections::BTreeMap;

use crate::error::{Result, UniregError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Classification under an affine domain shift.
    Zsda,
    /// The prior-uniformity ladder sweep over latent priors.
    PriorLadder,
    /// Few-shot prototypical episodes.
    Episodic,
    /// Contrastive metric learning.
    MetricLearning,
    /// Classification evaluated under affine image corruption.
    Ood,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Zsda,
        Experiment::PriorLadder,
        Experiment::Episodic,
        Experiment::MetricLearning,
        Experiment::Ood,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Zsda => "zsda",
            Experiment::PriorLadder => "prior_ladder",
            Experiment::Episodic => "episodic",
            Experiment::MetricLearning => "metric_learning",
            Experiment::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<Experiment> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                UniregError::Config(format!(
                    "unknown experiment `{s}`, expected one of zsda, prior_ladder, episodic, metric_learning, ood"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy)]
enum KeyType {
    USize,
    F64,
    Bool,
    Str,
    Choice(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy)]
enum Scope {
    All,
    Only(&'static [Experiment]),
}

struct KeySpec {
    name: &'static str,
    ty: KeyType,
    default: &'static str,
    /// Per-experiment default overrides.
    special: &'static [(Experiment, &'static str)],
    scope: Scope,
}

use Experiment::{Episodic, MetricLearning, Ood, PriorLadder, Zsda};

const SCHEMA: &[KeySpec] = &[
    KeySpec { name: "steps", ty: KeyType::USize, default: "2000", special: &[], scope: Scope::All },
    KeySpec { name: "batch_size", ty: KeyType::USize, default: "128", special: &[], scope: Scope::All },
    KeySpec { name: "eval_every", ty: KeyType::USize, default: "200", special: &[], scope: Scope::All },
    KeySpec { name: "eval_batch", ty: KeyType::USize, default: "512", special: &[], scope: Scope::All },
    KeySpec { name: "embed_dim", ty: KeyType::USize, default: "8", special: &[], scope: Scope::All },
    KeySpec { name: "encoder.hidden", ty: KeyType::USize, default: "64", special: &[], scope: Scope::All },
    KeySpec {
        name: "encoder.activation",
        ty: KeyType::Choice(&["relu", "tanh"]),
        default: "relu",
        special: &[],
        scope: Scope::All,
    },
    KeySpec {
        name: "encoder.output_activation",
        ty: KeyType::Choice(&["none", "tanh", "sigmoid"]),
        default: "none",
        special: &[],
        scope: Scope::All,
    },
    KeySpec { name: "encoder.lr", ty: KeyType::F64, default: "0.001", special: &[], scope: Scope::All },
    KeySpec {
        name: "regularizer.gamma",
        ty: KeyType::F64,
        default: "0.1",
        special: &[(MetricLearning, "0.4")],
        scope: Scope::All,
    },
    KeySpec { name: "regularizer.disc_lr", ty: KeyType::F64, default: "0.001", special: &[], scope: Scope::All },
    KeySpec { name: "regularizer.disc_updates", ty: KeyType::USize, default: "1", special: &[], scope: Scope::All },
    KeySpec {
        name: "regularizer.loss_form",
        ty: KeyType::Choice(&["saturating", "non_saturating"]),
        default: "saturating",
        special: &[],
        scope: Scope::All,
    },
    KeySpec {
        name: "prior.kind",
        ty: KeyType::Choice(&["uniform", "gaussian"]),
        default: "uniform",
        special: &[],
        scope: Scope::All,
    },
    KeySpec { name: "prior.low", ty: KeyType::F64, default: "-1", special: &[], scope: Scope::All },
    KeySpec { name: "prior.high", ty: KeyType::F64, default: "1", special: &[], scope: Scope::All },
    KeySpec { name: "prior.mean", ty: KeyType::F64, default: "0", special: &[], scope: Scope::All },
    KeySpec { name: "prior.variance", ty: KeyType::F64, default: "1", special: &[], scope: Scope::All },
    KeySpec { name: "probe.steps", ty: KeyType::USize, default: "300", special: &[], scope: Scope::All },
    KeySpec { name: "probe.final_only", ty: KeyType::Bool, default: "true", special: &[], scope: Scope::All },
    KeySpec {
        name: "task.classes",
        ty: KeyType::USize,
        default: "8",
        special: &[(Ood, "4")],
        scope: Scope::Only(&[Zsda, PriorLadder, Ood]),
    },
    KeySpec {
        name: "task.input_dim",
        ty: KeyType::USize,
        default: "16",
        special: &[],
        scope: Scope::Only(&[Zsda, PriorLadder]),
    },
    KeySpec {
        name: "task.class_scale",
        ty: KeyType::F64,
        default: "0.5",
        special: &[],
        scope: Scope::Only(&[Zsda, PriorLadder, Episodic, MetricLearning]),
    },
    KeySpec {
        name: "task.shift_degrees",
        ty: KeyType::F64,
        default: "30",
        special: &[],
        scope: Scope::Only(&[Zsda, PriorLadder]),
    },
    KeySpec {
        name: "task.shift_translation",
        ty: KeyType::F64,
        default: "0.5",
        special: &[],
        scope: Scope::Only(&[Zsda, PriorLadder]),
    },
    KeySpec {
        name: "task.shift_scale",
        ty: KeyType::F64,
        default: "1",
        special: &[],
        scope: Scope::Only(&[Zsda, PriorLadder]),
    },
    KeySpec { name: "episode.n_way", ty: KeyType::USize, default: "5", special: &[], scope: Scope::Only(&[Episodic]) },
    KeySpec { name: "episode.k_shot", ty: KeyType::USize, default: "5", special: &[], scope: Scope::Only(&[Episodic]) },
    KeySpec { name: "episode.n_query", ty: KeyType::USize, default: "10", special: &[], scope: Scope::Only(&[Episodic]) },
    KeySpec {
        name: "pool.classes",
        ty: KeyType::USize,
        default: "30",
        special: &[],
        scope: Scope::Only(&[Episodic, MetricLearning]),
    },
    KeySpec {
        name: "pool.per_class",
        ty: KeyType::USize,
        default: "40",
        special: &[],
        scope: Scope::Only(&[Episodic, MetricLearning]),
    },
    KeySpec {
        name: "pool.input_dim",
        ty: KeyType::USize,
        default: "16",
        special: &[],
        scope: Scope::Only(&[Episodic, MetricLearning]),
    },
    KeySpec { name: "metric.margin", ty: KeyType::F64, default: "1", special: &[], scope: Scope::Only(&[MetricLearning]) },
    KeySpec { name: "ladder.seeds", ty: KeyType::USize, default: "5", special: &[], scope: Scope::Only(&[PriorLadder]) },
    KeySpec { name: "ood.images", ty: KeyType::Str, default: "", special: &[], scope: Scope::Only(&[Ood]) },
    KeySpec { name: "ood.labels", ty: KeyType::Str, default: "", special: &[], scope: Scope::Only(&[Ood]) },
    KeySpec { name: "ood.side", ty: KeyType::USize, default: "8", special: &[], scope: Scope::Only(&[Ood]) },
    KeySpec { name: "ood.per_class", ty: KeyType::USize, default: "80", special: &[], scope: Scope::Only(&[Ood]) },
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.name == key)
}

impl KeySpec {
    fn applies_to(&self, experiment: Experiment) -> bool {
        match self.scope {
            Scope::All => true,
            Scope::Only(list) => list.contains(&experiment),
        }
    }

    fn default_for(&self, experiment: Experiment) -> &'static str {
        self.special
            .iter()
            .find(|(e, _)| *e == experiment)
            .map(|(_, v)| *v)
            .unwrap_or(self.default)
    }

    fn check_value(&self, value: &str) -> Result<()> {
        let bad = |want: &str| {
            Err(UniregError::Config(format!(
                "config key `{}` expects {want}, got `{value}`",
                self.name
            )))
        };
        match self.ty {
            KeyType::USize => {
                if value.parse::<usize>().is_err() {
                    return bad("a non-negative integer");
                }
            }
            KeyType::F64 => match value.parse::<f64>() {
                Ok(v) if v.is_finite() => {}
                _ => return bad("a finite number"),
            },
            KeyType::Bool => {
                if value != "true" && value != "false" {
                    return bad("true or false");
                }
            }
            KeyType::Str => {}
            KeyType::Choice(options) => {
                if !options.contains(&value) {
                    return bad(&format!("one of {}", options.join(", ")));
                }
            }
        }
        Ok(())
    }
}

/// A validated experiment configuration: the experiment name plus the keys
/// that were explicitly set. Every other applicable key resolves to its
/// schema default.
#[derive(Debug, Clone)]
pub struct Config {
    experiment: Experiment,
    entries: BTreeMap<String, String>,
}

impl Config {
    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, and the `experiment` key is required.
    pub fn parse(text: &str) -> Result<Config> {
        let mut raw = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(UniregError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if raw.insert(key.clone(), value).is_some() {
                return Err(UniregError::Config(format!(
                    "config key `{key}` is set twice"
                )));
            }
        }
        let experiment = raw
            .remove("experiment")
            .ok_or_else(|| UniregError::Config("missing required key `experiment`".into()))?;
        Config::from_entries(Experiment::parse(&experiment)?, raw)
    }

    /// Build from an experiment and pre-split entries, validating each key.
    pub fn from_entries(
        experiment: Experiment,
        entries: BTreeMap<String, String>,
    ) -> Result<Config> {
        let mut config = Config { experiment, entries: BTreeMap::new() };
        for (key, value) in entries {
            config.set(&key, &value)?;
        }
        Ok(config)
    }

    pub fn new(experiment: Experiment) -> Config {
        Config { experiment, entries: BTreeMap::new() }
    }

    /// Set one key, enforcing existence, scope, and value type. Used both
    /// by the parser and by `--override`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "experiment" {
            return Err(UniregError::Config(
                "the experiment cannot be overridden; write a new config".into(),
            ));
        }
        let spec = spec_of(key).ok_or_else(|| {
            UniregError::Config(format!("unknown config key `{key}`"))
        })?;
        if !spec.applies_to(self.experiment) {
            return Err(UniregError::Config(format!(
                "config key `{key}` does not apply to experiment `{}`",
                self.experiment.as_str()
            )));
        }
        spec.check_value(value)?;
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        self.experiment
    }

    fn resolved_value(&self, key: &str) -> Result<&str> {
        let spec = spec_of(key).ok_or_else(|| {
            UniregError::Config(format!("unknown config key `{key}`"))
        })?;
        if !spec.applies_to(self.experiment) {
            return Err(UniregError::Config(format!(
                "config key `{key}` does not apply to experiment `{}`",
                self.experiment.as_str()
            )));
        }
        Ok(self
            .entries
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| spec.default_for(self.experiment)))
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.resolved_value(key)?.parse().map_err(|_| {
            UniregError::Config(format!("config key `{key}` is not an integer"))
        })
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        self.resolved_value(key)?.parse().map_err(|_| {
            UniregError::Config(format!("config key `{key}` is not a number"))
        })
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        Ok(self.resolved_value(key)? == "true")
    }

    pub fn str_of(&self, key: &str) -> Result<&str> {
        self.resolved_value(key)
    }

    /// The keys that were explicitly set, exactly as given. Together with
    /// the experiment this re-creates the config.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = self.entries.clone();
        out.insert("experiment".into(), self.experiment.as_str().into());
        out
    }

    /// Every key applicable to this experiment with its final value,
    /// defaults included.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("experiment".to_string(), self.experiment.as_str().to_string());
        for spec in SCHEMA {
            if spec.applies_to(self.experiment) {
                let value = self
                    .entries
                    .get(spec.name)
                    .cloned()
                    .unwrap_or_else(|| spec.default_for(self.experiment).to_string());
                out.insert(spec.name.to_string(), value);
            }
        }
        out
    }

    /// Render back to parseable `key = value` text.
    pub fn to_text(&self) -> String {
        let mut out = format!("experiment = {}\n", self.experiment.as_str());
        for (key, value) in &self.entries {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

/// Rebuild a config from an echo map (as stored in a run manifest).
pub fn config_from_echo(echo: &BTreeMap<String, String>) -> Result<Config> {
    let mut entries = echo.clone();
    let experiment = entries
        .remove("experiment")
        .ok_or_else(|| UniregError::Config("echo is missing `experiment`".into()))?;
    Config::from_entries(Experiment::parse(&experiment)?, entries)
}
