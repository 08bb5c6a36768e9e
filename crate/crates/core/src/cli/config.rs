use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::CliError;
use crate::data::{GeneratorConfig, SpriteSource};
use crate::model::{Ablation, ModelConfig};
use crate::training::OptimizerConfig;

pub const PRESETS: [&str; 4] = ["desk", "mnist-paper", "kth-paper", "ucf-paper"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub validate_every: u64,
    /// Held-out sequences scored at each validation.
    pub validation_sequences: usize,
    pub time_budget_secs: Option<f64>,
    pub refit_batches: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            validate_every: 250,
            validation_sequences: 64,
            time_budget_secs: None,
            refit_batches: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Everything a subcommand needs beyond its paths. Built from defaults, an
/// optional JSON file, `--set key=value` overrides and dedicated flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub ablation: Ablation,
    pub seed: u64,
    /// Full model description; the preset's when absent.
    pub model: Option<ModelConfig>,
    pub data: GeneratorConfig,
    pub num_train: usize,
    pub num_test: usize,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            ablation: Ablation::None,
            seed: 0,
            model: None,
            data: GeneratorConfig::default(),
            num_train: 1000,
            num_test: 256,
            train: TrainSettings::default(),
        }
    }
}

/// Dedicated flags that override config values.
#[derive(Debug, Default, Clone)]
pub struct FlagOverrides {
    pub preset: Option<String>,
    pub ablation: Option<String>,
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub size: Option<usize>,
    pub digits: Option<usize>,
    pub sprites: Option<std::path::PathBuf>,
    pub shapes: bool,
    pub num_test: Option<usize>,
    pub num_train: Option<usize>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Writes `raw` at a dotted `key`. The key must already exist; values parse
/// as JSON when they can and are taken as strings otherwise.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?,
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Usage(format!("'{part}' in '{key}' is not an index")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Usage(format!("index {i} out of range in '{key}'")))?
            }
            _ => return Err(CliError::Usage(format!("'{key}' goes below a plain value"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn preset_model(name: &str) -> Result<ModelConfig, CliError> {
    ModelConfig::preset(name)
        .ok_or_else(|| CliError::Usage(format!("unknown preset '{name}' (one of {})", PRESETS.join(", "))))
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, sets: &[String], flags: &FlagOverrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::Usage(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            }
            merge(&mut value, patch);
        }
        if let Some(p) = &flags.preset {
            value["preset"] = Value::String(p.clone());
        }
        let mut pairs = Vec::with_capacity(sets.len());
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{s}'")))?;
            pairs.push((k.trim(), v.trim()));
        }
        if value["model"].is_null() && pairs.iter().any(|(k, _)| k.starts_with("model.")) {
            let preset = value["preset"].as_str().unwrap_or_default().to_string();
            value["model"] = serde_json::to_value(preset_model(&preset)?).expect("model serializes");
        }
        for (k, v) in pairs {
            set_path(&mut value, k, v)?;
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        config.apply(flags)?;
        config.model()?;
        Ok(config)
    }

    fn apply(&mut self, flags: &FlagOverrides) -> Result<(), CliError> {
        if let Some(a) = &flags.ablation {
            self.ablation = Ablation::ALL
                .into_iter()
                .find(|x| x.name() == a)
                .ok_or_else(|| CliError::Usage(format!("unknown ablation '{a}'")))?;
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(f) = flags.frames {
            self.data.frames = f;
        }
        if let Some(s) = flags.size {
            self.data.canvas = s;
        }
        if let Some(d) = flags.digits {
            self.data.sprites_per_sequence = d;
        }
        if let Some(p) = &flags.sprites {
            self.data.source = SpriteSource::IdxFile(p.clone());
        }
        if flags.shapes {
            self.data.source = SpriteSource::BuiltinShapes;
        }
        if let Some(n) = flags.num_test {
            self.num_test = n;
        }
        if let Some(n) = flags.num_train {
            self.num_train = n;
        }
        self.data.seed = self.seed;
        Ok(())
    }

    /// Model description with the ablation applied, validated.
    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let base = match &self.model {
            Some(m) => m.clone(),
            None => preset_model(&self.preset)?,
        };
        let m = base.with_ablation(self.ablation);
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }

    /// Checks that generated frames fit the model.
    pub fn check_data_fits(&self, model: &ModelConfig) -> Result<(), CliError> {
        let need = model.input_frames + model.predict_frames;
        if self.data.canvas != model.input_size {
            return Err(CliError::Usage(format!(
                "frame size {} does not match the model's {}",
                self.data.canvas, model.input_size
            )));
        }
        if self.data.frames < need {
            return Err(CliError::Usage(format!(
                "{} frames per sequence, the model needs {need}",
                self.data.frames
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(sets: &[&str]) -> Result<RunConfig, CliError> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        RunConfig::resolve(None, &sets, &FlagOverrides::default())
    }

    #[test]
    fn defaults_resolve_to_desk() {
        let c = resolve(&[]).unwrap();
        assert_eq!(c.model().unwrap(), ModelConfig::desk());
    }

    #[test]
    fn set_overrides_nested_values() {
        let c = resolve(&[
            "train.steps=7",
            "train.optimizer.momentum=0.9",
            "model.lstm_hidden=8",
        ])
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.optimizer.momentum, 0.9);
        assert_eq!(c.model().unwrap().lstm_hidden, 8);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(matches!(resolve(&["train.stepz=7"]), Err(CliError::Usage(_))));
        assert!(matches!(resolve(&["model.bogus=1"]), Err(CliError::Usage(_))));
        assert!(matches!(resolve(&["novalue"]), Err(CliError::Usage(_))));
    }

    #[test]
    fn file_merges_under_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"steps": 3, "batch_size": 4}, "seed": 5}"#).unwrap();
        let sets = vec!["train.steps=9".to_string()];
        let c = RunConfig::resolve(Some(&path), &sets, &FlagOverrides::default()).unwrap();
        assert_eq!(
            (c.train.steps, c.train.batch_size, c.seed, c.data.seed),
            (9, 4, 5, 5)
        );
        std::fs::write(&path, r#"{"extra": 1}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &[], &FlagOverrides::default()).is_err());
    }

    #[test]
    fn flags_win_and_ablation_applies() {
        let flags = FlagOverrides {
            ablation: Some("no-residual".into()),
            seed: Some(11),
            ..Default::default()
        };
        let c = RunConfig::resolve(None, &[], &flags).unwrap();
        assert_eq!(c.seed, 11);
        let m = c.model().unwrap();
        assert_eq!(m, ModelConfig::desk().with_ablation(Ablation::NoResidual));
        let bad = FlagOverrides {
            preset: Some("huge".into()),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::resolve(None, &[], &bad),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn mismatched_frame_size_is_reported() {
        let flags = FlagOverrides {
            size: Some(32),
            ..Default::default()
        };
        let c = RunConfig::resolve(None, &[], &flags).unwrap();
        assert!(c.check_data_fits(&c.model().unwrap()).is_err());
    }
}
