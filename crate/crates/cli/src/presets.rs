//! Named experiment configurations. Inference presets point at the output
//! directory of the matching training preset.

use gestalt_core::datagen::{DisturbanceSpec, PendulumParams};
use gestalt_core::gestaltvae::TrainConfig;
use gestalt_core::inference::{Groups, InferenceConfig};
use gestalt_core::popcode::{Coding, PopcodeConfig};

use crate::config::{default_seeds, AblationArm, DataSpec, ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};

pub const TRAINING_SUBJECT: u64 = 35;
pub const TEST_SUBJECT: u64 = 5;

pub const PRESETS: [&str; 14] = [
    "pendulum",
    "pendulum-raw",
    "walker",
    "walker-raw",
    "walker-exp1",
    "walker-exp2",
    "walker-exp3",
    "pendulum-exp4",
    "walker-ablation",
    "perspective-default",
    "perspective-translation",
    "perspective-rotation",
    "perspective-raw",
    "walker-joint",
];

fn base(kind: ExperimentKind, name: &str, data: DataSpec) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        name: name.into(),
        data,
        train: TrainConfig::default(),
        model: None,
        inference: InferenceConfig::default(),
        disturbance: DisturbanceSpec::default(),
        permutation: None,
        seeds: default_seeds(),
        arms: Vec::new(),
        output: None,
    }
}

fn training(name: &str, data: DataSpec, train: TrainConfig) -> ExperimentConfig {
    ExperimentConfig {
        train,
        ..base(ExperimentKind::Train, name, data)
    }
}

pub fn pendulum_training(coding: Coding) -> TrainConfig {
    let popcode = PopcodeConfig {
        coding,
        ..PopcodeConfig::planar()
    };
    match coding {
        Coding::Population => TrainConfig {
            popcode,
            hidden: 45,
            latent: 25,
            lr: [1e-2, 1e-2, 1e-3],
            epochs: 100,
            ..TrainConfig::default()
        },
        Coding::Raw => TrainConfig {
            popcode,
            hidden: 25,
            latent: 10,
            lr: [1e-2, 1e-2, 1e-3],
            epochs: 400,
            kl_weight: 0.01,
            ..TrainConfig::default()
        },
    }
}

pub fn walker_training(coding: Coding) -> TrainConfig {
    let popcode = PopcodeConfig {
        coding,
        ..PopcodeConfig::default()
    };
    match coding {
        Coding::Population => TrainConfig {
            popcode,
            hidden: 45,
            latent: 25,
            lr: [1e-3, 8e-4, 5e-4],
            epochs: 40,
            ..TrainConfig::default()
        },
        Coding::Raw => TrainConfig {
            popcode,
            hidden: 25,
            latent: 10,
            lr: [1e-3, 2e-5, 8e-4],
            epochs: 400,
            ..TrainConfig::default()
        },
    }
}

/// Binding hyperparameters of the four binding experiments.
pub fn binding_inference(experiment: usize) -> InferenceConfig {
    let (betas, eta) = match experiment {
        1 => ([5.0, 1.0, 0.125], 1.0),
        2 => ([6.0, 0.0, 0.0], 1.0),
        3 => ([8.0, 2.0, 0.125], 1.0),
        _ => ([1.0, 8.0, 2.0], 0.1),
    };
    InferenceConfig {
        betas,
        eta_binding: eta,
        gamma_binding: 0.9,
        groups: Groups::BINDING,
        steps: 1000,
        ..InferenceConfig::default()
    }
}

pub fn perspective_inference() -> InferenceConfig {
    InferenceConfig {
        betas: [8.0, 3.0, 0.125],
        eta_rotation: 1e-2,
        gamma_rotation: 0.9,
        eta_translation: 8e-2,
        gamma_translation: 0.9,
        groups: Groups::PERSPECTIVE,
        steps: 3000,
        ..InferenceConfig::default()
    }
}

pub fn perspective_disturbance() -> DisturbanceSpec {
    DisturbanceSpec {
        rotation_deg: [25.0, 35.0, 45.0],
        translation: vec![-2.0, 2.5, -4.0],
    }
}

fn inference(
    kind: ExperimentKind,
    name: &str,
    model: &str,
    data: DataSpec,
    inference: InferenceConfig,
) -> ExperimentConfig {
    ExperimentConfig {
        model: Some(model.into()),
        inference,
        ..base(kind, name, data)
    }
}

fn binding(name: &str, model: &str, experiment: usize) -> ExperimentConfig {
    let data = if experiment == 4 {
        DataSpec::Pendulum(PendulumParams::default())
    } else {
        DataSpec::walker(TEST_SUBJECT)
    };
    inference(ExperimentKind::Bind, name, model, data, binding_inference(experiment))
}

fn perspective(name: &str, model: &str, disturbance: DisturbanceSpec) -> ExperimentConfig {
    ExperimentConfig {
        disturbance,
        ..inference(
            ExperimentKind::Perspective,
            name,
            model,
            DataSpec::walker(TEST_SUBJECT),
            perspective_inference(),
        )
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let walker_train = DataSpec::walker(TRAINING_SUBJECT);
    let pendulum = DataSpec::Pendulum(PendulumParams::default());
    Ok(match name {
        "pendulum" => training(name, pendulum, pendulum_training(Coding::Population)),
        "pendulum-raw" => training(name, pendulum, pendulum_training(Coding::Raw)),
        "walker" => training(name, walker_train, walker_training(Coding::Population)),
        "walker-raw" => training(name, walker_train, walker_training(Coding::Raw)),
        "walker-exp1" => binding(name, "walker-raw", 1),
        "walker-exp2" => binding(name, "walker", 2),
        "walker-exp3" => binding(name, "walker", 3),
        "pendulum-exp4" => binding(name, "pendulum", 4),
        "walker-ablation" => {
            let arm = |label: &str, model: &str, experiment| AblationArm {
                label: label.into(),
                model: model.into(),
                inference: binding_inference(experiment),
            };
            ExperimentConfig {
                arms: vec![arm("raw", "walker-raw", 1), arm("population", "walker", 3)],
                ..base(ExperimentKind::Ablation, name, DataSpec::walker(TEST_SUBJECT))
            }
        }
        "perspective-default" => perspective(name, "walker", perspective_disturbance()),
        "perspective-translation" => perspective(
            name,
            "walker",
            DisturbanceSpec {
                rotation_deg: [0.0; 3],
                ..perspective_disturbance()
            },
        ),
        "perspective-rotation" => perspective(
            name,
            "walker",
            DisturbanceSpec {
                translation: Vec::new(),
                ..perspective_disturbance()
            },
        ),
        "perspective-raw" => perspective(name, "walker-raw", perspective_disturbance()),
        "walker-joint" => ExperimentConfig {
            disturbance: perspective_disturbance(),
            ..inference(
                ExperimentKind::Joint,
                name,
                "walker",
                DataSpec::walker(TEST_SUBJECT),
                InferenceConfig {
                    groups: Groups::ALL,
                    eta_binding: 1.0,
                    gamma_binding: 0.9,
                    ..perspective_inference()
                },
            )
        },
        _ => {
            return Err(CliError::UnknownPreset {
                name: name.into(),
                available: PRESETS.join(", "),
            })
        }
    })
}
