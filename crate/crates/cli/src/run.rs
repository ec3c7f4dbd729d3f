use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gestalt_core::binding::{column_argmax, write_matrix_csv};
use gestalt_core::datagen::{apply_disturbance, DisturbanceSpec};
use gestalt_core::gestaltvae::{sequence_hash, TrainConfig};
use gestalt_core::inference::{
    infer_binding, infer_joint, infer_perspective, write_pose_csv, Discrepancy, InferenceOutcome,
};
use gestalt_core::{Model, Pose, Sequence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{seed_dir, DataSpec, ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};

pub const MANIFEST_FORMAT: &str = "gestalt-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const DATA_FILE: &str = "data.csv";
pub const MODEL_FILE: &str = "model.gm";
pub const CURVE_FILE: &str = "curve.csv";
pub const LOG_FILE: &str = "log.csv";
pub const BINDING_FILE: &str = "binding.csv";
pub const POSE_FILE: &str = "pose.csv";

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Ablation arm label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// SHA-256 of the model file trained or used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    /// Last over first epoch reconstruction loss per sub-modality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_ratio: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Discrepancy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last: Option<Discrepancy>,
    /// Observed feature with the strongest weight per slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax: Option<Vec<usize>>,
}

impl RunRecord {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            arm: None,
            error: None,
            model_sha256: None,
            recon_ratio: None,
            initial: None,
            last: None,
            argmax: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Everything needed to rerun an experiment and check its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// Hash of the sequence fed to the models.
    pub data_hash: String,
    /// Per-arm run directories of an ablation, relative to this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<PathBuf>,
    pub runs: Vec<RunRecord>,
}

impl Manifest {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok()).count()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Report(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(CliError::io(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Report(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Writes a sequence CSV with its JSON sidecar.
pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    seq.write_csv(create(path)?)?;
    write_json(&path.with_extension("json"), &seq.meta())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn prepare(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_json(&dir.join(CONFIG_FILE), config)
}

/// Runs an experiment and writes its artifact tree. Failed seeds are
/// recorded in the manifest rather than returned as errors.
pub fn run(config: &ExperimentConfig, root: &Path) -> Result<Outcome> {
    config.validate()?;
    match config.kind {
        ExperimentKind::Train => run_training(config, root),
        ExperimentKind::Ablation => run_ablation(config, root),
        _ => run_inference(config, root),
    }
}

fn finish(
    dir: PathBuf,
    config: &ExperimentConfig,
    data_hash: String,
    arms: Vec<PathBuf>,
    runs: Vec<RunRecord>,
) -> Result<Outcome> {
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        data_hash,
        arms,
        runs,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(Outcome { dir, manifest })
}

fn run_training(config: &ExperimentConfig, root: &Path) -> Result<Outcome> {
    let dir = config.output_dir(root);
    let seq = config.data.load(root)?;
    prepare(&dir, config)?;
    write_sequence(&seq, &dir.join(DATA_FILE))?;
    let runs: Vec<RunRecord> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut record = RunRecord::new(seed);
            let train = TrainConfig {
                seed,
                ..config.train.clone()
            };
            if let Err(e) = train_seed(&train, &seq, &dir.join(seed_dir(seed)), &mut record) {
                record.error = Some(e.to_string());
            }
            record
        })
        .collect();
    finish(dir, config, sequence_hash(&seq), Vec::new(), runs)
}

fn train_seed(train: &TrainConfig, seq: &Sequence, dir: &Path, record: &mut RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let model = Model::train(train, seq).map_err(|source| CliError::Run {
        seed: train.seed,
        source,
    })?;
    let path = dir.join(MODEL_FILE);
    model.save(&path)?;
    model.write_curve_csv(create(&dir.join(CURVE_FILE))?)?;
    let curve = &model.training.curve;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        record.recon_ratio = Some(std::array::from_fn(|k| last[k].recon / first[k].recon));
    }
    record.model_sha256 = Some(file_sha256(&path)?);
    Ok(())
}

fn run_inference(config: &ExperimentConfig, root: &Path) -> Result<Outcome> {
    let model_dir = config.model.as_ref().expect("validated");
    let models: Vec<PathBuf> = config
        .seeds
        .iter()
        .map(|&seed| {
            let path = ExperimentConfig::model_path(model_dir, root, seed);
            if path.is_file() {
                Ok(path)
            } else {
                Err(CliError::MissingModel { seed, path })
            }
        })
        .collect::<Result<_>>()?;
    let (seq, target) = config.trial(root)?;
    let dir = config.output_dir(root);
    prepare(&dir, config)?;
    write_sequence(&seq, &dir.join(DATA_FILE))?;
    let runs: Vec<RunRecord> = config
        .seeds
        .par_iter()
        .zip(&models)
        .map(|(&seed, model)| {
            let mut record = RunRecord::new(seed);
            let result = (|| {
                record.model_sha256 = Some(file_sha256(model)?);
                let model = Model::load(model)?;
                let run =
                    |r: gestalt_core::Result<InferenceOutcome<f64>>| r.map_err(|source| CliError::Run { seed, source });
                let target = target.clone();
                let out = match config.kind {
                    ExperimentKind::Bind => run(infer_binding(&model, &seq, &config.inference, target))?,
                    ExperimentKind::Perspective => run(infer_perspective(&model, &seq, &config.inference, target))?,
                    _ => run(infer_joint(&model, &seq, &config.inference, target, None))?,
                };
                write_outcome(&out, &dir.join(seed_dir(seed)), seq.dim())?;
                record.initial = Some(out.log.initial);
                record.last = Some(out.log.last());
                record.argmax = Some(column_argmax(&out.binding.weights()));
                Ok::<_, CliError>(())
            })();
            if let Err(e) = result {
                record.error = Some(e.to_string());
            }
            record
        })
        .collect();
    finish(dir, config, sequence_hash(&seq), Vec::new(), runs)
}

fn write_outcome(out: &InferenceOutcome<f64>, dir: &Path, dim: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    out.log.write_csv(create(&dir.join(LOG_FILE))?)?;
    write_matrix_csv(&out.binding.weights(), create(&dir.join(BINDING_FILE))?)?;
    write_pose_csv(&[Pose::identity(dim)?, out.pose.clone()], create(&dir.join(POSE_FILE))?)?;
    Ok(())
}

fn run_ablation(config: &ExperimentConfig, root: &Path) -> Result<Outcome> {
    let dir = config.output_dir(root);
    let arms: Vec<ExperimentConfig> = config
        .arms
        .iter()
        .map(|arm| ExperimentConfig {
            kind: ExperimentKind::Bind,
            name: arm.label.clone(),
            model: Some(crate::config::resolve(root, &arm.model)),
            inference: arm.inference.clone(),
            arms: Vec::new(),
            output: Some(dir.join(&arm.label)),
            ..config.clone()
        })
        .collect();
    for arm in &arms {
        arm.validate()?;
    }
    prepare(&dir, config)?;
    let mut runs = Vec::new();
    let mut data_hash = String::new();
    for arm in &arms {
        let out = run_inference(arm, root)?;
        data_hash = out.manifest.data_hash.clone();
        runs.extend(out.manifest.runs.into_iter().map(|r| RunRecord {
            arm: Some(arm.name.clone()),
            ..r
        }));
    }
    let labels: Vec<PathBuf> = config.arms.iter().map(|a| PathBuf::from(&a.label)).collect();
    let outcome = finish(dir.clone(), config, data_hash, labels, runs)?;
    if outcome.manifest.failed() == 0 {
        let arm_dirs: Vec<PathBuf> = config.arms.iter().map(|a| dir.join(&a.label)).collect();
        crate::report::report(&arm_dirs, &dir)?;
    }
    Ok(outcome)
}

/// Writes a generated sequence, optionally disturbed.
pub fn gen_data(data: &DataSpec, disturbance: &DisturbanceSpec, root: &Path, path: &Path) -> Result<Sequence> {
    let seq = apply_disturbance(&data.load(root)?, disturbance)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    write_sequence(&seq, path)?;
    Ok(seq)
}
