use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::defenses::{DefenseConfig, DefenseMode};
use crate::numerics::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let dir = Path::new("data/mnist");
        DatasetConfig {
            kind: DatasetKind::Mnist,
            train_images: dir.join("train-images-idx3-ubyte.gz"),
            train_labels: dir.join("train-labels-idx1-ubyte.gz"),
            test_images: dir.join("t10k-images-idx3-ubyte.gz"),
            test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
            train_limit: None,
            test_limit: None,
            classes: 10,
            dim: 20,
            per_class: 100,
            spread: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    /// Class count known from the configuration alone.
    pub fn classes_hint(&self) -> usize {
        match self.kind {
            DatasetKind::Mnist => 10,
            DatasetKind::Blobs => self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// 0.05 on MNIST, 0.1 on blobs when unset.
    pub lr: Option<f64>,
    /// 10 on MNIST, 30 on blobs when unset.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Cap on rounds per epoch.
    pub max_rounds: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: None,
            epochs: None,
            batch_size: 64,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    /// Drawn from the run seed when unset.
    pub target_label: Option<usize>,
    /// Triggered training samples; 1% of the training set when unset.
    pub poison_train: Option<usize>,
    /// Triggered test samples; 100 on MNIST, 5% of the test set otherwise.
    pub poison_test: Option<usize>,
    /// One trigger cell per passive party instead of a single attacker.
    pub distributed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelInference,
    GradReplacement,
    ActivePoison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Passive party (session index) mounting a single-party attack; the
    /// last passive party when unset.
    pub attacker: Option<usize>,
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Rounds whose gradients the label-inference attacker records.
    pub rounds: Vec<u64>,
    pub targets: usize,
    pub amplify: f64,
    pub random_h: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            attacker: None,
            iters: 2000,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            rounds: vec![0],
            targets: 10,
            amplify: 10.0,
            random_h: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoaeSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub hidden: Option<usize>,
    /// Derived from the run seed when unset.
    pub seed: Option<u64>,
    /// Load a trained CoAE instead of training one.
    pub file: Option<PathBuf>,
}

impl Default for CoaeSettings {
    fn default() -> Self {
        CoaeSettings {
            steps: 3000,
            lr: 1e-3,
            batch: 64,
            hidden: None,
            seed: None,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub parties: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub trigger: TriggerConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub coae: CoaeSettings,
    pub seed: u64,
    pub repeats: usize,
    /// Fill the wall_time_s column; off by default so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            parties: 2,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            trigger: TriggerConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            coae: CoaeSettings::default(),
            seed: 0,
            repeats: 1,
            record_wall_time: false,
        }
    }
}

fn invalid(path: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.to_string(),
        message: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let value: Value = serde_json::from_str(text).map_err(|e| invalid("<root>", e.to_string()))?;
        ExperimentConfig::from_value(value, &[])
    }

    /// Parses `value`, then applies `path=value` overrides by dotted path.
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self, HarnessError> {
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(o, "override must look like path=value"))?;
            set_path(&mut value, path, parse_scalar(raw))?;
        }
        serde_json::from_value(value).map_err(|e| invalid("<root>", e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| invalid(&path.display().to_string(), e.to_string()))?;
        let cfg = ExperimentConfig::from_value(value, overrides)?.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with the dataset-dependent defaults filled in.
    pub fn resolved(mut self) -> Self {
        let mnist = self.dataset.kind == DatasetKind::Mnist;
        self.train.lr.get_or_insert(if mnist { 0.05 } else { 0.1 });
        self.train.epochs.get_or_insert(if mnist { 10 } else { 30 });
        self
    }

    pub fn lr(&self) -> f64 {
        self.train.lr.unwrap_or(0.05)
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(10)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.parties < 2 {
            return Err(invalid("parties", format!("need at least 2, got {}", self.parties)));
        }
        if self.model.hidden == 0 {
            return Err(invalid("model.hidden", "must be > 0"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be > 0"));
        }
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return Err(invalid("train.lr", "must be a finite value >= 0"));
        }
        if self.repeats == 0 {
            return Err(invalid("repeats", "must be > 0"));
        }
        match self.dataset.kind {
            DatasetKind::Mnist => {
                let d = &self.dataset;
                for (key, p) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    if !p.is_file() {
                        return Err(invalid(key, format!("{} does not exist", p.display())));
                    }
                }
            }
            DatasetKind::Blobs => {
                let d = &self.dataset;
                if d.classes < 2 || d.dim < d.classes || d.dim < self.parties {
                    return Err(invalid("dataset", "blobs need classes >= 2 and dim >= max(classes, parties)"));
                }
                if !(0.0 < d.test_fraction && d.test_fraction < 1.0) {
                    return Err(invalid("dataset.test_fraction", "must be in (0, 1)"));
                }
            }
        }
        if self.attack.kind == AttackKind::LabelInference {
            if self.attack.rounds.is_empty() {
                return Err(invalid("attack.rounds", "label inference needs at least one round"));
            }
            if !(self.attack.lr > 0.0) {
                return Err(invalid("attack.lr", "must be > 0"));
            }
        }
        if self.attack.kind == AttackKind::GradReplacement && !(self.attack.amplify > 0.0) {
            return Err(invalid("attack.amplify", "must be > 0"));
        }
        if let Some(a) = self.attack.attacker {
            if a + 1 >= self.parties {
                return Err(invalid("attack.attacker", format!("party {a} is not a passive party")));
            }
        }
        self.defense.validate().map_err(|e| invalid("defense", e.to_string()))?;
        if self.defense.mode == DefenseMode::Coae {
            if let Some(f) = &self.coae.file {
                if !f.is_file() {
                    return Err(invalid("coae.file", format!("{} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&sort_keys(v)).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON, ignoring `repeats`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.repeats = 1;
        let digest = Sha256::digest(c.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// JSON when it parses, otherwise a bare string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `value` at a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), HarnessError> {
    if path.is_empty() {
        return Err(invalid(path, "empty override path"));
    }
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(invalid(path, format!("'{}' is not an object", keys[..i].join("."))));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = map.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}
