use std::path::{Path, PathBuf};

use gestalt_core::binding::{diagonal_target, target_for_permutation};
use gestalt_core::datagen::{
    apply_disturbance, generate_walker, simulate_pendulum, validate_permutation, CsvLayout, DisturbanceSpec,
    PendulumParams, WalkerParams,
};
use gestalt_core::gestaltvae::TrainConfig;
use gestalt_core::inference::{InferenceConfig, InferenceTarget};
use gestalt_core::Sequence;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the directory relative paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "GESTALT_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const DEFAULT_SEEDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Train,
    Bind,
    Perspective,
    Joint,
    Ablation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Bind => "bind",
            Self::Perspective => "perspective",
            Self::Joint => "joint",
            Self::Ablation => "ablation",
        }
    }

    pub fn is_inference(self) -> bool {
        matches!(self, Self::Bind | Self::Perspective | Self::Joint)
    }
}

/// Where a sequence comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    Pendulum(PendulumParams),
    /// Synthetic walker; `subject` jitters body and gait deterministically.
    Walker {
        subject: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frames: Option<usize>,
    },
    Csv {
        path: PathBuf,
        dim: usize,
        #[serde(default = "yes")]
        time_column: bool,
    },
}

fn yes() -> bool {
    true
}

impl DataSpec {
    pub fn walker(subject: u64) -> Self {
        Self::Walker { subject, frames: None }
    }

    pub fn load(&self, root: &Path) -> Result<Sequence> {
        Ok(match self {
            Self::Pendulum(p) => simulate_pendulum(p)?,
            Self::Walker { subject, frames } => {
                let mut p = WalkerParams::subject(*subject);
                if let Some(f) = frames {
                    p.frames = *f;
                }
                generate_walker(&p)?
            }
            Self::Csv { path, dim, time_column } => Sequence::load_csv(
                resolve(root, path),
                CsvLayout {
                    dim: *dim,
                    time_column: *time_column,
                },
            )?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            Self::Pendulum(_) => "pendulum".into(),
            Self::Walker { subject, .. } => format!("walker subject {subject}"),
            Self::Csv { path, .. } => path.display().to_string(),
        }
    }
}

/// One side of an ablation: a model family and its inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub label: String,
    pub model: PathBuf,
    pub inference: InferenceConfig,
}

/// A complete, rerunnable experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub name: String,
    /// Training data for `train`, the test trial otherwise.
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory of a train run (`seed-<s>/model.gm`) or a single model file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    /// Feature order of the observed trial; new feature `k` is old `permutation[k]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<AblationArm>,
    /// Defaults to `<root>/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub fn default_seeds() -> Vec<u64> {
    (0..DEFAULT_SEEDS as u64).collect()
}

/// Relative paths resolve against `root`.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Parses JSON, reporting the field path of the first error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(path, e.into_inner().to_string())
    })
}

impl ExperimentConfig {
    /// Reads a config file or the `config` member of a run manifest.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(".", format!("{}: {e}", path.display())))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(crate::run::MANIFEST_FORMAT) => {
                let config = value
                    .get("config")
                    .ok_or_else(|| CliError::config("config", "manifest has no config"))?;
                parse_json(&config.to_string()).map_err(|e| match e {
                    CliError::Config { path, message } => CliError::config(format!("config.{path}"), message),
                    e => e,
                })
            }
            _ => parse_json(&text),
        }
    }

    pub fn output_dir(&self, root: &Path) -> PathBuf {
        match &self.output {
            Some(p) => resolve(root, p),
            None => root.join(&self.name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(CliError::config(
                "name",
                format!("`{}` is not a plain directory name", self.name),
            ));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::config("seeds", "seeds must be distinct"));
        }
        match self.kind {
            ExperimentKind::Train => {
                if self.train.hidden == 0 || self.train.latent == 0 || self.train.batch_size == 0 {
                    return Err(CliError::config(
                        "train",
                        "hidden, latent and batch_size must be positive",
                    ));
                }
            }
            ExperimentKind::Ablation => {
                if self.arms.len() < 2 {
                    return Err(CliError::config("arms", "an ablation needs at least two arms"));
                }
                for (i, arm) in self.arms.iter().enumerate() {
                    arm.inference
                        .validate()
                        .map_err(|e| CliError::config(format!("arms[{i}].inference"), e.to_string()))?;
                    if arm.label.is_empty() || arm.label.contains(['/', '\\']) {
                        return Err(CliError::config(
                            format!("arms[{i}].label"),
                            "must be a plain directory name",
                        ));
                    }
                }
                let mut labels: Vec<&str> = self.arms.iter().map(|a| a.label.as_str()).collect();
                labels.sort_unstable();
                if labels.windows(2).any(|w| w[0] == w[1]) {
                    return Err(CliError::config("arms", "arm labels must be distinct"));
                }
            }
            _ => {
                if self.model.is_none() {
                    return Err(CliError::config("model", "inference needs a trained model"));
                }
                self.inference
                    .validate()
                    .map_err(|e| CliError::config("inference", e.to_string()))?;
            }
        }
        Ok(())
    }

    /// The observed trial: loaded, disturbed, then reordered.
    pub fn trial(&self, root: &Path) -> Result<(Sequence, InferenceTarget)> {
        let seq = apply_disturbance(&self.data.load(root)?, &self.disturbance)
            .map_err(|e| CliError::config("disturbance", e.to_string()))?;
        let n = seq.n_features();
        let (seq, assignment) = match &self.permutation {
            Some(p) => {
                validate_permutation(p, n).map_err(|e| CliError::config("permutation", e.to_string()))?;
                (seq.permute_features(p)?, target_for_permutation(p))
            }
            None => (seq, diagonal_target(n)),
        };
        let target = InferenceTarget::new(assignment, seq.dim(), &self.disturbance, seq.units_per_meter())
            .map_err(|e| CliError::config("disturbance", e.to_string()))?;
        Ok((seq, target))
    }

    /// Model file used for `seed`.
    pub fn model_path(model: &Path, root: &Path, seed: u64) -> PathBuf {
        let base = resolve(root, model);
        if base.extension().is_some_and(|e| e == "gm") {
            base
        } else {
            base.join(seed_dir(seed)).join(crate::run::MODEL_FILE)
        }
    }
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"kind": "bind", "name": "b", "data": {"walker": {"subject": 5}}, "model": "walker"}"#
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c: ExperimentConfig = parse_json(minimal()).unwrap();
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(c.inference, InferenceConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let text = minimal().replace(r#""model""#, r#""inference": {"betas": [1, 1, 1], "eta": 2}, "model""#);
        match parse_json::<ExperimentConfig>(&text) {
            Err(CliError::Config { path, message }) => {
                assert_eq!(path, "inference.eta");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = minimal().replace("subject", "subjekt");
        match parse_json::<ExperimentConfig>(&text) {
            Err(CliError::Config { path, .. }) => assert!(path.starts_with("data.walker"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut c: ExperimentConfig = parse_json(minimal()).unwrap();
        c.model = None;
        assert!(matches!(c.validate(), Err(CliError::Config { path, .. }) if path == "model"));
        c.model = Some("m".into());
        c.seeds = vec![1, 1];
        assert!(matches!(c.validate(), Err(CliError::Config { path, .. }) if path == "seeds"));
        c.seeds = vec![0];
        c.inference.eta_binding = -1.0;
        assert!(matches!(c.validate(), Err(CliError::Config { path, .. }) if path == "inference"));
    }

    #[test]
    fn model_paths() {
        let root = Path::new("/r");
        assert_eq!(
            ExperimentConfig::model_path(Path::new("walker"), root, 3),
            PathBuf::from("/r/walker/seed-3/model.gm")
        );
        assert_eq!(
            ExperimentConfig::model_path(Path::new("/m/x.gm"), root, 3),
            PathBuf::from("/m/x.gm")
        );
    }

    #[test]
    fn permuted_trial_has_matching_target() {
        let mut c: ExperimentConfig = parse_json(minimal()).unwrap();
        let mut p: Vec<usize> = (0..15).collect();
        p.swap(0, 4);
        c.permutation = Some(p);
        let (seq, target) = c.trial(Path::new(".")).unwrap();
        assert_eq!(seq.labels()[0], gestalt_core::datagen::WALKER_JOINTS[4]);
        assert_eq!(target.assignment[4], 0);
        c.permutation = Some(vec![0; 15]);
        assert!(matches!(c.trial(Path::new(".")), Err(CliError::Config { path, .. }) if path == "permutation"));
    }
}
