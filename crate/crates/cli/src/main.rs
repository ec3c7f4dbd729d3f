use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gestalt_cli::config::{DataSpec, ExperimentConfig, ExperimentKind, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV};
use gestalt_cli::presets::{preset, PRESETS};
use gestalt_cli::report::RunSummary;
use gestalt_cli::run::gen_data;
use gestalt_cli::CliError;
use gestalt_core::datagen::{DisturbanceSpec, PendulumParams};
use gestalt_core::gestaltvae::ReconLoss;
use gestalt_core::inference::{InferenceConfig, Reduction};
use gestalt_core::popcode::Coding;

#[derive(Parser)]
#[command(
    name = "gestalt",
    version,
    about = "Retrospective feature binding and perspective inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated sequence as CSV with a JSON sidecar.
    GenData(GenDataArgs),
    /// Train Gestalt models, one per seed.
    Train(TrainArgs),
    /// Infer the feature binding of a trial.
    Bind(BindArgs),
    /// Infer the rotation and translation of a disturbed trial.
    Perspective(PerspectiveArgs),
    /// Infer binding and perspective together.
    Joint(JointArgs),
    /// Aggregate run directories across seeds into tables and figures.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Pendulum,
    Walker,
}

#[derive(Args)]
struct GenDataArgs {
    source: Source,
    /// Walker subject.
    #[arg(long, default_value_t = 35)]
    subject: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[command(flatten)]
    disturbance: DisturbanceArgs,
    /// Output CSV; defaults to `<root>/data/<source>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
    root: PathBuf,
}

#[derive(Args)]
struct Common {
    /// Named configuration, one of the presets listed under `--help`.
    #[arg(long, long_help = preset_help())]
    preset: Option<String>,
    /// JSON config or a run manifest; replaces the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Comma-separated seeds, one independently trained model each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run name, the output directory under the root.
    #[arg(long)]
    name: Option<String>,
    /// Output directory, overriding `<root>/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory relative paths resolve against.
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
    root: PathBuf,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

fn preset_help() -> String {
    format!("Named configuration: {}", PRESETS.join(", "))
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    coding: Option<CodingArg>,
    /// Walker training subject.
    #[arg(long)]
    subject: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    /// Learning rates for posture, direction, magnitude.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    lr: Option<Vec<f64>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kl_weight: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodingArg {
    Population,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Se,
    Bce,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Args)]
struct TrialArgs {
    /// Train-run directory or model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Walker test subject.
    #[arg(long)]
    subject: Option<u64>,
    /// Trial CSV with a time column, replacing the generated data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dimension of `--data`.
    #[arg(long, default_value_t = 3, requires = "data")]
    data_dim: usize,
    /// Feature order; new feature k is old feature permutation[k].
    #[arg(long, value_delimiter = ',')]
    permutation: Option<Vec<usize>>,
    /// Posture loss weight.
    #[arg(long)]
    beta_pos: Option<f64>,
    /// Direction loss weight.
    #[arg(long)]
    beta_dir: Option<f64>,
    /// Magnitude loss weight.
    #[arg(long)]
    beta_mag: Option<f64>,
    /// Adaptation steps (frames, cycling the trial).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    loss: Option<LossArg>,
    #[arg(long)]
    reduction: Option<ReductionArg>,
}

#[derive(Args)]
struct BindingArgs {
    /// Binding learning rate (eta^f).
    #[arg(long, visible_alias = "eta-binding")]
    eta_f: Option<f64>,
    /// Binding momentum (gamma^f).
    #[arg(long, visible_alias = "gamma-binding")]
    gamma_f: Option<f64>,
    /// Uniform starting bias of every binding neuron.
    #[arg(long, allow_hyphen_values = true)]
    binding_init: Option<f64>,
}

#[derive(Args)]
struct PoseArgs {
    /// Rotation learning rate (eta^r).
    #[arg(long)]
    eta_r: Option<f64>,
    /// Rotation momentum (gamma^r).
    #[arg(long)]
    gamma_r: Option<f64>,
    /// Translation learning rate (eta^b).
    #[arg(long)]
    eta_b: Option<f64>,
    /// Translation momentum (gamma^b).
    #[arg(long)]
    gamma_b: Option<f64>,
}

#[derive(Args)]
struct DisturbanceArgs {
    /// Disturbance angles in degrees about x, y, z.
    #[arg(long, value_delimiter = ',', num_args = 3, allow_hyphen_values = true)]
    rotation: Option<Vec<f64>>,
    /// Disturbance translation in scene units.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    translation: Option<Vec<f64>>,
}

#[derive(Args)]
struct BindArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    binding: BindingArgs,
}

#[derive(Args)]
struct PerspectiveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    pose: PoseArgs,
    #[command(flatten)]
    disturbance: DisturbanceArgs,
}

#[derive(Args)]
struct JointArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    binding: BindingArgs,
    #[command(flatten)]
    pose: PoseArgs,
    #[command(flatten)]
    disturbance: DisturbanceArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Where comparisons go; defaults to the single run directory or
    /// `<root>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
    root: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &Common, default: &str, accepted: &[ExperimentKind]) -> Result<ExperimentConfig, CliError> {
    let mut c = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => preset(default)?,
    };
    if !accepted.contains(&c.kind) {
        return Err(CliError::config(
            "kind",
            format!("`{}` config given to a {} command", c.kind.name(), accepted[0].name()),
        ));
    }
    set(&mut c.seeds, common.seeds.clone());
    set(&mut c.name, common.name.clone());
    if common.out.is_some() {
        c.output = common.out.clone();
    }
    Ok(c)
}

fn apply_trial(c: &mut ExperimentConfig, t: &TrialArgs) -> Result<(), CliError> {
    if let Some(path) = &t.data {
        c.data = DataSpec::Csv {
            path: path.clone(),
            dim: t.data_dim,
            time_column: true,
        };
    }
    if let Some(s) = t.subject {
        match &mut c.data {
            DataSpec::Walker { subject, .. } => *subject = s,
            _ => return Err(CliError::config("data", "--subject needs a walker trial")),
        }
    }
    if t.permutation.is_some() {
        c.permutation = t.permutation.clone();
    }
    if t.model.is_some() {
        if c.kind == ExperimentKind::Ablation {
            return Err(CliError::config("model", "an ablation takes its models from its arms"));
        }
        c.model = t.model.clone();
    }
    for_each_inference(c, |inf| {
        set(&mut inf.betas[0], t.beta_pos);
        set(&mut inf.betas[1], t.beta_dir);
        set(&mut inf.betas[2], t.beta_mag);
        set(&mut inf.steps, t.steps);
        set(
            &mut inf.loss,
            t.loss.map(|l| match l {
                LossArg::Se => ReconLoss::SquaredError,
                LossArg::Bce => ReconLoss::Bce,
            }),
        );
        set(
            &mut inf.reduction,
            t.reduction.map(|r| match r {
                ReductionArg::Sum => Reduction::Sum,
                ReductionArg::Mean => Reduction::Mean,
            }),
        );
    });
    Ok(())
}

fn for_each_inference(c: &mut ExperimentConfig, mut f: impl FnMut(&mut InferenceConfig)) {
    f(&mut c.inference);
    for arm in &mut c.arms {
        f(&mut arm.inference);
    }
}

fn apply_binding(c: &mut ExperimentConfig, b: &BindingArgs) {
    for_each_inference(c, |inf| {
        set(&mut inf.eta_binding, b.eta_f);
        set(&mut inf.gamma_binding, b.gamma_f);
        set(&mut inf.binding_init, b.binding_init);
    });
}

fn apply_pose(c: &mut ExperimentConfig, p: &PoseArgs) {
    set(&mut c.inference.eta_rotation, p.eta_r);
    set(&mut c.inference.gamma_rotation, p.gamma_r);
    set(&mut c.inference.eta_translation, p.eta_b);
    set(&mut c.inference.gamma_translation, p.gamma_b);
}

fn apply_disturbance(spec: &mut DisturbanceSpec, d: &DisturbanceArgs) {
    if let Some(r) = &d.rotation {
        spec.rotation_deg = [r[0], r[1], r[2]];
    }
    set(&mut spec.translation, d.translation.clone());
}

fn apply_training(c: &mut ExperimentConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(coding) = a.coding {
        c.train.popcode.coding = match coding {
            CodingArg::Population => Coding::Population,
            CodingArg::Raw => Coding::Raw,
        };
    }
    if let Some(s) = a.subject {
        match &mut c.data {
            DataSpec::Walker { subject, .. } => *subject = s,
            _ => return Err(CliError::config("data", "--subject needs walker data")),
        }
    }
    set(&mut c.train.epochs, a.epochs);
    set(&mut c.train.hidden, a.hidden);
    set(&mut c.train.latent, a.latent);
    set(&mut c.train.batch_size, a.batch_size);
    set(&mut c.train.kl_weight, a.kl_weight);
    if let Some(lr) = &a.lr {
        c.train.lr = [lr[0], lr[1], lr[2]];
    }
    Ok(())
}

fn print_summaries(summaries: &[RunSummary]) {
    for s in summaries {
        let finals: Vec<String> = s
            .finals
            .iter()
            .map(|(m, mean, std)| format!("{m} {mean:.4} ± {std:.4}"))
            .collect();
        println!("{} ({} runs): {}", s.label, s.runs, finals.join(", "));
    }
}

fn execute(config: ExperimentConfig, common: &Common) -> anyhow::Result<ExitCode> {
    if common.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = gestalt_cli::run(&config, &common.root)?;
    for r in &outcome.manifest.runs {
        let arm = r.arm.as_deref().map_or(String::new(), |a| format!("{a} "));
        match &r.error {
            Some(e) => eprintln!("{arm}seed {}: FAILED: {e}", r.seed),
            None => {
                if let Some(ratio) = r.recon_ratio {
                    println!(
                        "{arm}seed {}: final/first reconstruction {:.3} {:.3} {:.3}",
                        r.seed, ratio[0], ratio[1], ratio[2]
                    );
                } else if let (Some(i), Some(l)) = (r.initial, r.last) {
                    println!(
                        "{arm}seed {}: FBE {:.3} -> {:.3}, OD {:.2} -> {:.2}, TD {:.3} -> {:.3}",
                        r.seed, i.fbe, l.fbe, i.od, l.od, i.td, l.td
                    );
                }
            }
        }
    }
    let failed = outcome.manifest.failed();
    if failed > 0 {
        eprintln!(
            "{}",
            CliError::RunsFailed {
                failed,
                total: outcome.manifest.runs.len(),
            }
        );
        return Ok(ExitCode::from(1));
    }
    let dirs: Vec<PathBuf> = if outcome.manifest.arms.is_empty() {
        vec![outcome.dir.clone()]
    } else {
        outcome.manifest.arms.iter().map(|a| outcome.dir.join(a)).collect()
    };
    let summaries = gestalt_cli::report(&dirs, &outcome.dir)?;
    print_summaries(&summaries);
    println!("artifacts in {}", outcome.dir.display());
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => {
            let data = match a.source {
                Source::Pendulum => {
                    let mut p = PendulumParams::default();
                    set(&mut p.frames, a.frames);
                    DataSpec::Pendulum(p)
                }
                Source::Walker => DataSpec::Walker {
                    subject: a.subject,
                    frames: a.frames,
                },
            };
            let mut disturbance = DisturbanceSpec::default();
            apply_disturbance(&mut disturbance, &a.disturbance);
            let name = match a.source {
                Source::Pendulum => "pendulum.csv".to_string(),
                Source::Walker => format!("walker-{}.csv", a.subject),
            };
            let out = a.out.unwrap_or_else(|| a.root.join("data").join(name));
            let seq = gen_data(&data, &disturbance, Path::new("."), &out)?;
            println!(
                "{}: {} frames, {} features, {}D",
                out.display(),
                seq.len(),
                seq.n_features(),
                seq.dim()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(a) => {
            let mut c = base_config(&a.common, "walker", &[ExperimentKind::Train])?;
            apply_training(&mut c, &a)?;
            execute(c, &a.common)
        }
        Command::Bind(a) => {
            let mut c = base_config(
                &a.common,
                "walker-exp3",
                &[ExperimentKind::Bind, ExperimentKind::Ablation],
            )?;
            apply_trial(&mut c, &a.trial)?;
            apply_binding(&mut c, &a.binding);
            execute(c, &a.common)
        }
        Command::Perspective(a) => {
            let mut c = base_config(&a.common, "perspective-default", &[ExperimentKind::Perspective])?;
            apply_trial(&mut c, &a.trial)?;
            apply_pose(&mut c, &a.pose);
            apply_disturbance(&mut c.disturbance, &a.disturbance);
            execute(c, &a.common)
        }
        Command::Joint(a) => {
            let mut c = base_config(&a.common, "walker-joint", &[ExperimentKind::Joint])?;
            apply_trial(&mut c, &a.trial)?;
            apply_binding(&mut c, &a.binding);
            apply_pose(&mut c, &a.pose);
            apply_disturbance(&mut c.disturbance, &a.disturbance);
            execute(c, &a.common)
        }
        Command::Report(a) => {
            let out = match (&a.out, a.dirs.as_slice()) {
                (Some(o), _) => o.clone(),
                (None, [one]) => one.clone(),
                (None, _) => a.root.join("report"),
            };
            let summaries = gestalt_cli::report(&a.dirs, &out).context("report failed")?;
            print_summaries(&summaries);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
