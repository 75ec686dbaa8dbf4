//! Training loop, early stopping, checkpoints, evaluation and the ablation
//! suite.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aae::{aae_step, discriminator_phase, reconstruction_loss, AaeOptimizers};
use crate::config::{ConfigError, Sweep, TrainConfig, SWEEP_GRID};
use crate::data::{make_batches, DataError, ModalSample};
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::metrics::{evaluate as evaluate_scores, MetricsError, MetricsOptions, MetricsReport};
use crate::model::{Ablation, Mcihn};
use crate::optim::Adam;
use crate::params::{Bindings, ParamId};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

/// Samples per forward pass at evaluation time.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: TensorError,
    },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

trait StageExt<T> {
    fn stage(self, name: impl Into<String>) -> Result<T, TrainError>;
}

impl<T> StageExt<T> for Result<T, TensorError> {
    fn stage(self, name: impl Into<String>) -> Result<T, TrainError> {
        self.map_err(|source| TrainError::Stage {
            stage: name.into(),
            source,
        })
    }
}

/// Losses of one batch. Encoder-stage entries are `None` for modalities that
/// did not run that stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_ae: [Option<f64>; 3],
    pub l_disc: [Option<f64>; 3],
    pub l_gen: [Option<f64>; 3],
    pub l_adp: f64,
    pub l_mul: f64,
    pub l_combined: f64,
}

/// Epoch means of the step losses plus validation metrics. `l_combined` is
/// defined as `l_adp + l_mul` of the epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ae: [Option<f64>; 3],
    pub l_disc: Option<f64>,
    pub l_gen: Option<f64>,
    pub l_adp: f64,
    pub l_mul: f64,
    pub l_combined: f64,
    pub val: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Validation metrics of the returned checkpoint.
    pub final_validation: MetricsReport,
}

impl History {
    /// Whether any step recorded an encoder-stage loss.
    pub fn has_aae_losses(&self) -> bool {
        self.steps
            .iter()
            .any(|s| s.l_ae.iter().chain(&s.l_disc).chain(&s.l_gen).any(Option::is_some))
    }

    /// One JSON object per epoch.
    pub fn epochs_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    /// One JSON object per step.
    pub fn steps_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Mcihn,
    pub config: TrainConfig,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub best_val_mae: f64,
    pub seeds: Seeds,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn check_dataset(config: &TrainConfig, samples: &[ModalSample]) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(DataError::Empty.into());
    }
    for (i, s) in samples.iter().enumerate() {
        s.validate(i, &config.model.shapes)?;
    }
    Ok(())
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            what: what.to_string(),
            epoch,
            step,
        })
    }
}

/// Validation metrics of `model` on `samples`, dropout off.
pub fn validate_model(
    model: &Mcihn,
    config: &TrainConfig,
    samples: &[ModalSample],
) -> Result<MetricsReport, TrainError> {
    let scores = model
        .predict(samples, config.ablation, EVAL_CHUNK)
        .stage("validation forward")?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let options = MetricsOptions {
        acc2_drop_neutral: config.acc2_drop_neutral,
    };
    Ok(evaluate_scores(&scores, &labels, config.scheme, options)?)
}

/// Trains per batch in order: the three encoder stages of every active
/// modality, then one joint update of `L(Adp) + L(Mul)`. Stops once the
/// validation MAE has not improved for `patience` epochs and returns the
/// best epoch's parameters.
pub fn train(
    config: &TrainConfig,
    train: &[ModalSample],
    valid: &[ModalSample],
) -> Result<(Checkpoint, History), TrainError> {
    config.validate()?;
    check_dataset(config, train)?;
    check_dataset(config, valid)?;
    let ablation = config.ablation;
    let active = ablation.active();
    let adp_weight = if config.adaptation { config.adp_weight } else { 0.0 };

    let mut model =
        Mcihn::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed)).stage("initialization")?;
    // prior draws and dropout masks
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let mut aae_opts: Vec<AaeOptimizers> = (0..3).map(|_| AaeOptimizers::new(config.adam)).collect();
    let mut joint = Adam::new(config.adam);
    let disc_params: Vec<ParamId> = model.aae.iter().flat_map(|a| a.discriminator_params()).collect();

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(Mcihn, usize, MetricsReport)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            train.len(),
            config.batch_size,
            config.shuffle_seed.wrapping_add(epoch as u64),
            true,
        )?;
        let first_step = steps.len();
        for batch in batches {
            let step = steps.len() + 1;
            let samples: Vec<&ModalSample> = batch.iter().map(|&i| &train[i]).collect();
            let mut rec = StepRecord {
                epoch,
                step,
                l_ae: [None; 3],
                l_disc: [None; 3],
                l_gen: [None; 3],
                l_adp: 0.0,
                l_mul: 0.0,
                l_combined: 0.0,
            };

            if ablation.uses_aae() {
                for &m in active {
                    let i = m.index();
                    let xs: Vec<&Tensor> = samples.iter().map(|s| s.get(m)).collect();
                    if config.merge_updates {
                        let d = discriminator_phase(
                            &model.aae[i],
                            &mut model.store,
                            &mut aae_opts[i].discriminator,
                            &xs,
                            &mut rng,
                        )
                        .stage(format!("aae[{m}] discriminator"))?;
                        rec.l_disc[i] = Some(finite(d, &format!("aae[{m}] discriminator loss"), epoch, step)?);
                    } else {
                        let l = aae_step(&model.aae[i], &mut model.store, &mut aae_opts[i], &xs, &mut rng)
                            .stage(format!("aae[{m}]"))?;
                        rec.l_ae[i] = Some(finite(
                            l.reconstruction,
                            &format!("aae[{m}] reconstruction loss"),
                            epoch,
                            step,
                        )?);
                        rec.l_disc[i] = Some(finite(
                            l.discriminator,
                            &format!("aae[{m}] discriminator loss"),
                            epoch,
                            step,
                        )?);
                        rec.l_gen[i] = Some(finite(l.generator, &format!("aae[{m}] generator loss"), epoch, step)?);
                    }
                }
            }

            let mut tape = Tape::new();
            let p = model
                .store
                .bind(&mut tape, |id| !disc_params.contains(&id))
                .stage("joint binding")?;
            let out = model
                .forward_batch(
                    &mut tape,
                    &p,
                    &samples,
                    ablation,
                    adp_weight,
                    Some((config.dropout, &mut rng)),
                )
                .stage("joint forward (gates, fusion)")?;
            let mut loss = out.combined;
            if config.merge_updates && ablation.uses_aae() {
                for &m in active {
                    let i = m.index();
                    let aae = &model.aae[i];
                    let mut recs = Vec::with_capacity(samples.len());
                    let mut lat = Vec::with_capacity(samples.len());
                    for (sample, latents) in samples.iter().zip(&out.latents) {
                        let s = latents[i].expect("active latent");
                        let x = tape.constant(sample.get(m).clone()).stage("merged reconstruction")?;
                        let x_hat = aae.decode(&mut tape, &p, s).stage("merged reconstruction")?;
                        recs.push(reconstruction_loss(&mut tape, x, x_hat).stage("merged reconstruction")?);
                        lat.push(s);
                    }
                    let r = tape
                        .concat_rows(&recs)
                        .and_then(|r| tape.mean(r))
                        .stage("merged reconstruction")?;
                    let all = tape.concat_rows(&lat).stage("merged generator")?;
                    let g = aae
                        .encoder_adversarial_loss(&mut tape, &p, all)
                        .stage("merged generator")?;
                    rec.l_ae[i] = Some(finite(
                        tape.value(r).item(),
                        &format!("aae[{m}] reconstruction loss"),
                        epoch,
                        step,
                    )?);
                    rec.l_gen[i] = Some(finite(
                        tape.value(g).item(),
                        &format!("aae[{m}] generator loss"),
                        epoch,
                        step,
                    )?);
                    loss = tape.add(loss, r).and_then(|l| tape.add(l, g)).stage("merged loss")?;
                }
            }
            rec.l_adp = finite(tape.value(out.adp).item(), "adaptation loss", epoch, step)?;
            rec.l_mul = finite(tape.value(out.mul).item(), "fusion loss", epoch, step)?;
            rec.l_combined = finite(tape.value(out.combined).item(), "combined loss", epoch, step)?;
            let grads = tape.backward(loss).stage("joint backward")?;
            joint.step(&mut model.store, &p.collect(&grads)).stage("joint update")?;
            steps.push(rec);
        }

        let epoch_steps = &steps[first_step..];
        let modal_mean =
            |f: fn(&StepRecord) -> &[Option<f64>; 3], i: usize| mean(epoch_steps.iter().filter_map(|s| f(s)[i]));
        let l_ae = [0, 1, 2].map(|i| modal_mean(|s| &s.l_ae, i));
        let across = |f: fn(&StepRecord) -> &[Option<f64>; 3]| mean((0..3).filter_map(|i| modal_mean(f, i)));
        let l_adp = mean(epoch_steps.iter().map(|s| s.l_adp)).unwrap_or(0.0);
        let l_mul = mean(epoch_steps.iter().map(|s| s.l_mul)).unwrap_or(0.0);
        let val = validate_model(&model, config, valid)?;
        finite(val.mae, "validation MAE", epoch, steps.len())?;
        log::info!("epoch {epoch}: adp {l_adp:.5} mul {l_mul:.5} val mae {:.5}", val.mae);
        epochs.push(EpochRecord {
            epoch,
            l_ae,
            l_disc: across(|s| &s.l_disc),
            l_gen: across(|s| &s.l_gen),
            l_adp,
            l_mul,
            l_combined: l_adp + l_mul,
            val: val.clone(),
        });

        let improved = best.as_ref().is_none_or(|(_, _, b)| val.mae < b.mae);
        if improved {
            best = Some((model.clone(), epoch, val));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }

    let (best_model, best_epoch, final_validation) = best.expect("at least one epoch runs");
    let checkpoint = Checkpoint {
        model: best_model,
        config: config.clone(),
        epoch: best_epoch,
        best_val_mae: final_validation.mae,
        seeds: Seeds {
            init: config.seed,
            shuffle: config.shuffle_seed,
        },
    };
    let history = History {
        steps,
        epochs,
        best_epoch,
        stopped_early,
        final_validation,
    };
    Ok((checkpoint, history))
}

/// Forward-only metrics of a checkpoint on `samples`.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[ModalSample]) -> Result<MetricsReport, TrainError> {
    check_dataset(&checkpoint.config, samples)?;
    validate_model(&checkpoint.model, &checkpoint.config, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub value: f64,
    pub best_val_mae: f64,
}

/// Trains once per grid value of the configured sweep target.
pub fn sweep(
    config: &TrainConfig,
    train_set: &[ModalSample],
    valid: &[ModalSample],
) -> Result<Vec<SweepResult>, TrainError> {
    let mut out = Vec::new();
    for value in SWEEP_GRID {
        let mut c = config.clone();
        match config.sweep {
            Sweep::None => return Ok(out),
            Sweep::Dropout => c.dropout = value,
            Sweep::AdpWeight => c.adp_weight = value,
        }
        let (ck, _) = train(&c, train_set, valid)?;
        out.push(SweepResult {
            value,
            best_val_mae: ck.best_val_mae,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub has_aae_losses: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub mae: f64,
    pub corr: f64,
    pub acc2: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn run(&self, ablation: Ablation, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.ablation == ablation && r.seed == seed)
    }

    /// Seed-averaged rows in table order.
    pub fn rows(&self) -> Vec<AblationRow> {
        Ablation::TABLE
            .iter()
            .filter_map(|&a| {
                let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.ablation == a).collect();
                let avg = |f: fn(&AblationRun) -> f64| mean(runs.iter().map(|r| f(r)));
                Some(AblationRow {
                    ablation: a,
                    mae: avg(|r| r.best_val_mae)?,
                    corr: avg(|r| r.report.corr)?,
                    acc2: avg(|r| r.report.acc2.unwrap_or(0.0))?,
                    f1: avg(|r| r.report.f1)?,
                })
            })
            .collect()
    }

    /// Number of seeds on which the full model's validation MAE is no worse
    /// than every variant in `others`.
    pub fn full_wins(&self, others: &[Ablation]) -> usize {
        self.seeds
            .iter()
            .filter(|&&seed| {
                let Some(full) = self.run(Ablation::Full, seed) else {
                    return false;
                };
                others
                    .iter()
                    .all(|&o| self.run(o, seed).is_some_and(|r| full.best_val_mae <= r.best_val_mae))
            })
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8} {:>8}",
            "Model", "MAE", "Corr", "Acc-2", "F1"
        );
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.ablation.row_name(),
                r.mae,
                r.corr,
                r.acc2,
                r.f1
            );
        }
        s
    }
}

/// Trains every table variant on every seed. Each seed re-seeds both the
/// initialization and the data order.
pub fn run_ablation_suite(
    config: &TrainConfig,
    train_set: &[ModalSample],
    valid: &[ModalSample],
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for ablation in Ablation::TABLE {
            let c = TrainConfig {
                ablation,
                seed,
                shuffle_seed: seed,
                ..config.clone()
            };
            let (ck, history) = train(&c, train_set, valid)?;
            log::info!("{ablation} seed {seed}: best val mae {:.5}", ck.best_val_mae);
            runs.push(AblationRun {
                ablation,
                seed,
                best_val_mae: ck.best_val_mae,
                best_epoch: ck.epoch,
                report: history.final_validation.clone(),
                has_aae_losses: history.has_aae_losses(),
            });
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        runs,
    })
}

/// Central-difference check of the combined loss w.r.t. every parameter it
/// depends on. Dropout uses the same mask for every evaluation.
pub fn model_grad_check(
    model: &Mcihn,
    samples: &[ModalSample],
    ablation: Ablation,
    dropout: f64,
    eps: f64,
) -> Result<GradCheckReport, TensorError> {
    let excluded: Vec<ParamId> = model
        .aae
        .iter()
        .flat_map(|a| a.decoder_params().into_iter().chain(a.discriminator_params()))
        .collect();
    let checked: Vec<ParamId> = model
        .reachable_params(ablation)
        .into_iter()
        .filter(|id| !excluded.contains(id))
        .collect();
    let thetas: Vec<Tensor> = checked.iter().map(|&id| model.store.get(id).clone()).collect();
    let refs: Vec<&ModalSample> = samples.iter().collect();
    let f = |tape: &mut Tape, vars: &[crate::tape::Var]| {
        let mut bound = Vec::with_capacity(model.store.len());
        for id in model.store.ids() {
            let v = match checked.iter().position(|&c| c == id) {
                Some(k) => vars[k],
                None => tape.constant(model.store.get(id).clone())?,
            };
            bound.push(v);
        }
        let p = Bindings::from_vars(bound);
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0);
        let out = model.forward_batch(tape, &p, &refs, ablation, 1.0, Some((dropout, &mut rng)))?;
        Ok(out.combined)
    };
    grad_check_many(f, &thetas, eps)
}
