//! The training loop: deterministic batch stream, Adam with cosine decay,
//! loss-curve logging, periodic checkpoints, and exact resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mogen_core::diffusion::{build_schedule, training_step, NoiseSchedule};
use mogen_core::error::{CoreError, Result};
use mogen_core::model::Denoiser;
use mogen_core::numerics::{adam_update, cosine_lr, AdamConfig, OptimizerState};
use mogen_core::rng::Rng;
use mogen_core::schema::{
    build_dataset, BodyPartPartition, Dataset, Split, SyntheticVocabulary, NUM_PARTS,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
const LOCK_FILE: &str = ".lock";

pub fn schedule_from(cfg: &RunConfig) -> Result<NoiseSchedule> {
    build_schedule(
        cfg.schedule.steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
}

/// Build the synthetic corpus the configuration describes.
pub fn prepare_dataset(
    cfg: &RunConfig,
) -> Result<(Dataset<f32>, BodyPartPartition, SyntheticVocabulary)> {
    let partition = BodyPartPartition::default_partition(cfg.data.shape.feature_dim)?;
    let vocab = SyntheticVocabulary::standard(NUM_PARTS);
    let dataset = build_dataset(
        cfg.data.dataset_size,
        &vocab,
        &partition,
        &cfg.data.shape,
        cfg.data.seed,
    )?;
    Ok((dataset, partition, vocab))
}

pub struct TrainSummary {
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps_run: u64,
    pub checkpoint_dir: PathBuf,
}

/// Exclusive ownership of a run directory for the duration of training.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CoreError::contract(
                format!(
                    "run directory {} is locked by another training run \
                     (remove {LOCK_FILE} if stale)",
                    dir.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        fs::remove_file(&self.path).ok();
    }
}

/// Train a model under `run_dir`. With `resume` the loop picks up the
/// stored checkpoint (parameters, optimizer moments, and the random
/// stream) and continues exactly as the uninterrupted run would have.
pub fn run_training(
    cfg: &RunConfig,
    run_dir: &Path,
    resume: bool,
    quiet: bool,
) -> Result<TrainSummary> {
    run_training_until(cfg, run_dir, resume, quiet, None)
}

/// [`run_training`] with an optional early stop (an induced interruption;
/// the learning-rate schedule still spans the configured step count).
pub fn run_training_until(
    cfg: &RunConfig,
    run_dir: &Path,
    resume: bool,
    quiet: bool,
    stop_after: Option<u64>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    let _lock = RunLock::acquire(run_dir)?;
    cfg.save(&run_dir.join(RESOLVED_CONFIG_FILE))?;

    let (dataset, _partition, _vocab) = prepare_dataset(cfg)?;
    let train_set: Vec<&_> = dataset.iter().filter(|e| e.split == Split::Train).collect();
    if train_set.is_empty() {
        return Err(CoreError::contract("training split is empty"));
    }
    let schedule = schedule_from(cfg)?;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);

    let (mut model, mut opt, mut rng, start_step) = if resume {
        let ckpt = load_checkpoint(&ckpt_dir)?;
        // The step target and checkpoint cadence are operational knobs; a
        // resumed run may extend them. Everything else must match.
        let mut aligned = ckpt.config.clone();
        aligned.training.steps = cfg.training.steps;
        aligned.training.checkpoint_every = cfg.training.checkpoint_every;
        if aligned != *cfg {
            return Err(CoreError::contract(
                "resume config differs from the checkpointed config",
            ));
        }
        let step = ckpt.step;
        (
            ckpt.model,
            ckpt.optimizer,
            Rng::from_state(ckpt.rng_state),
            step,
        )
    } else {
        let model = Denoiser::<f32>::new(cfg.model.clone(), cfg.training.seed)?;
        let opt = OptimizerState::new(model.params.tensors());
        // Distinct stream from the weight-init seed.
        let rng = Rng::new(cfg.training.seed).derive(0x7ea1);
        (model, opt, rng, 0)
    };

    let adam = AdamConfig {
        beta1: cfg.optimizer.beta1,
        beta2: cfg.optimizer.beta2,
        eps: cfg.optimizer.eps,
    };
    let mut curve = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join(LOSS_CURVE_FILE))?;
    if start_step == 0 {
        writeln!(curve, "step,lr,loss")?;
    }

    let total = cfg.training.steps;
    let stop_at = stop_after.unwrap_or(total).min(total);
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in start_step..stop_at {
        let lr = cosine_lr(step, total, cfg.optimizer.lr_start, cfg.optimizer.lr_end);
        let batch: Vec<&_> = (0..cfg.optimizer.batch_size)
            .map(|_| train_set[rng.below(train_set.len())])
            .collect();
        let outcome = training_step(&model, &schedule, &batch, cfg.training.mask_prob, &mut rng)?;
        adam_update(
            model.params.tensors_mut(),
            &outcome.gradients,
            &mut opt,
            lr,
            &adam,
        )?;
        if step == start_step {
            first_loss = outcome.loss;
        }
        final_loss = outcome.loss;
        writeln!(curve, "{},{:.8e},{:.8e}", step + 1, lr, outcome.loss)?;

        let done = step + 1;
        if done % cfg.training.checkpoint_every == 0 || done == stop_at {
            curve.flush()?;
            save_checkpoint(&ckpt_dir, &model, &opt, cfg, done, rng.export_state())?;
        }
        if !quiet && (done % 100 == 0 || done == total) {
            eprintln!("step {done}/{total}  lr {lr:.3e}  loss {:.5}", outcome.loss);
        }
    }

    Ok(TrainSummary {
        first_loss,
        final_loss,
        steps_run: stop_at.saturating_sub(start_step),
        checkpoint_dir: ckpt_dir,
    })
}
