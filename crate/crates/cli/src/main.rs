use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mcihn::config::{Sweep, TrainConfig};
use mcihn::data::{
    generate_synthetic, read_feature_file, write_feature_file, DatasetHeader, LabelDistribution, LabelScheme,
    ModalSample, SyntheticSpec, DESK_SHAPES, FULL_SHAPES,
};
use mcihn::model::{Ablation, Mcihn, ModelConfig};
use mcihn::train::{evaluate, model_grad_check, run_ablation_suite, sweep, train, Checkpoint};

/// Largest relative error the gradient check accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "mcihn",
    version,
    about = "Multimodal sentiment model: data tools, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-signal synthetic dataset
    SynthGen(SynthArgs),
    /// Train one model and write a run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train every ablation variant over a list of seeds
    Ablate(AblateArgs),
    /// Check the full-model gradient against central differences
    Gradcheck(GradArgs),
    /// Print a dataset header
    DataInfo(InfoArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label scheme tag written to the header: mosi7 (continuous labels) or
    /// sims5 (five score levels)
    #[arg(long, default_value = "mosi7")]
    scheme: LabelScheme,
    /// Use the full-scale feature shapes instead of the desk-scale ones
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set batch_size=8`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_text(&text)?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
            c.set(k, v)?;
        }
        if let Some(a) = &self.ablation {
            c.set("ablation", a)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
            c.shuffle_seed = s;
        }
        if let Some(e) = self.epochs {
            c.max_epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.adam.lr = lr;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    acc2_drop_neutral: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value = "full")]
    ablation: String,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Args)]
struct InfoArgs {
    file: PathBuf,
}

fn load_data(path: &Path) -> Result<(DatasetHeader, Vec<ModalSample>)> {
    read_feature_file(path).with_context(|| format!("reading {}", path.display()))
}

/// Loads train and validation files and adopts their shapes and scheme.
fn load_pair(
    config: &mut TrainConfig,
    train_path: &Path,
    valid_path: &Path,
) -> Result<(Vec<ModalSample>, Vec<ModalSample>)> {
    let (th, train_set) = load_data(train_path)?;
    let (vh, valid) = load_data(valid_path)?;
    if th.shapes != vh.shapes {
        bail!("train and validation files have different feature shapes");
    }
    config.model.shapes = th.shapes;
    config.scheme = th.scheme;
    config.validate()?;
    Ok((train_set, valid))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_gen(a: SynthArgs) -> Result<()> {
    let shapes = if a.full_scale { FULL_SHAPES } else { DESK_SHAPES };
    let labels = match a.scheme {
        LabelScheme::Mosi7 => LabelDistribution::Uniform,
        LabelScheme::Sims5 => LabelDistribution::Levels(vec![-1.0, -0.5, 0.0, 0.5, 1.0]),
    };
    let spec = SyntheticSpec {
        count: a.count,
        shapes,
        rho: a.rho,
        labels,
        seed: a.seed,
    };
    let samples = generate_synthetic(&spec);
    write_feature_file(&a.out, &DatasetHeader::new(shapes, a.count, a.scheme), &samples)?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = a.config.load()?;
    let (train_set, valid) = load_pair(&mut config, &a.train, &a.valid)?;
    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    write(&a.run_dir.join("config.txt"), &config.to_text())?;
    if config.sweep != Sweep::None {
        let results = sweep(&config, &train_set, &valid)?;
        write(&a.run_dir.join("sweep.json"), &serde_json::to_string_pretty(&results)?)?;
        for r in &results {
            println!("{:>6} {:.5}", r.value, r.best_val_mae);
        }
        return Ok(());
    }
    let (checkpoint, history) = train(&config, &train_set, &valid)?;
    checkpoint.save(a.run_dir.join("checkpoint.json"))?;
    write(&a.run_dir.join("history.jsonl"), &history.epochs_jsonl())?;
    write(&a.run_dir.join("steps.jsonl"), &history.steps_jsonl())?;
    let report = history.final_validation.to_json();
    write(&a.run_dir.join("metrics.json"), &report)?;
    println!(
        "best epoch {} of {}, validation MAE {:.5}",
        history.best_epoch,
        history.epochs.len(),
        checkpoint.best_val_mae
    );
    println!("{report}");
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let mut checkpoint = Checkpoint::load(&a.checkpoint)?;
    if a.acc2_drop_neutral {
        checkpoint.config.acc2_drop_neutral = true;
    }
    let (header, samples) = load_data(&a.data)?;
    if header.shapes != checkpoint.config.model.shapes {
        bail!("dataset shapes do not match the checkpoint");
    }
    let report = evaluate(&checkpoint, &samples)?.to_json();
    if let Some(out) = &a.out {
        write(out, &report)?;
    }
    println!("{report}");
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let mut config = a.config.load()?;
    let (train_set, valid) = load_pair(&mut config, &a.train, &a.valid)?;
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    let table = run_ablation_suite(&config, &train_set, &valid, &a.seeds)?;
    write(&a.run_dir.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    write(&a.run_dir.join("ablation.txt"), &table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

fn run_gradcheck(a: GradArgs) -> Result<bool> {
    let ablation: Ablation = a.ablation.parse()?;
    let model = Mcihn::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let data = generate_synthetic(&SyntheticSpec::desk(a.batch.max(1), 0.5, a.seed.wrapping_add(1)));
    let report = model_grad_check(&model, &data, ablation, 0.5, a.eps)?;
    println!("coordinates checked: {}", report.coordinates);
    println!("kink crossings excluded: {}", report.kink_crossings);
    println!("max relative error (all coordinates): {:.3e}", report.max_rel_error_all);
    println!("max relative error: {:.3e}", report.max_rel_error);
    Ok(report.max_rel_error < GRAD_TOLERANCE)
}

fn data_info(a: InfoArgs) -> Result<()> {
    let (header, samples) = load_data(&a.file)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let info = serde_json::json!({
        "version": header.version,
        "count": header.count,
        "scheme": header.scheme,
        "shapes": {
            "v": [header.shapes[0].t, header.shapes[0].d],
            "t": [header.shapes[1].t, header.shapes[1].d],
            "a": [header.shapes[2].t, header.shapes[2].d],
        },
        "label_min": labels.iter().copied().fold(f64::INFINITY, f64::min),
        "label_max": labels.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => synth_gen(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::DataInfo(a) => data_info(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
