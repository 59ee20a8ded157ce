//! End-to-end steps shared by the command-line tool and the acceptance
//! suite: data generation, training with logging, and assimilator setup.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AssimilatorKind, ExperimentConfig};
use super::protocol::{derive_seed, Assimilator};
use crate::dynamics::{generate_dataset, Trajectory};
use crate::error::{Error, Result};
use crate::flow::{load_checkpoint_expecting, CheckpointMeta, VelocityModel};
use crate::train::{train_stage1, train_stage2, IterationStats, TrainLog};

const STREAM_STAGE1: u64 = 11;
const STREAM_STAGE2: u64 = 12;

/// Training and held-out test trajectories.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(Trajectory, Trajectory)> {
    let d = &cfg.data;
    let train = generate_dataset(&cfg.dynamics, d.spinup, d.train_length, d.train_seed)?;
    let test = generate_dataset(&cfg.dynamics, d.spinup, d.test_length, d.test_seed)?;
    Ok((train, test))
}

/// Fresh model normalised with the training climatology.
pub fn init_model(cfg: &ExperimentConfig, train: &Trajectory) -> Result<VelocityModel> {
    VelocityModel::new(
        cfg.arch(),
        train.config.h,
        train.config.w,
        train.config.variable_names(),
        train.stats().clone(),
        cfg.train.seed,
    )
}

/// Called after every training iteration with its index and statistics.
pub type Progress<'a> = &'a mut dyn FnMut(u64, &IterationStats);

fn logger<'a>(
    log: Option<&Path>,
    stage: u32,
    progress: Progress<'a>,
) -> Result<impl FnMut(u64, &IterationStats) -> Result<()> + 'a> {
    let mut file = log.map(TrainLog::create).transpose()?;
    Ok(move |i: u64, s: &IterationStats| {
        progress(i, s);
        match file.as_mut() {
            Some(f) => f.record(i, stage, s),
            None => Ok(()),
        }
    })
}

pub fn run_stage1(
    cfg: &ExperimentConfig,
    train: &Trajectory,
    model: &mut VelocityModel,
    meta: &mut CheckpointMeta,
    log: Option<&Path>,
    progress: Progress,
) -> Result<Vec<IterationStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, &[STREAM_STAGE1]));
    train_stage1(model, meta, train, &cfg.train, &mut rng, logger(log, 1, progress)?)
}

pub fn run_stage2(
    cfg: &ExperimentConfig,
    train: &Trajectory,
    model: &mut VelocityModel,
    meta: &mut CheckpointMeta,
    log: Option<&Path>,
    progress: Progress,
) -> Result<Vec<IterationStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, &[STREAM_STAGE2]));
    train_stage2(
        model,
        meta,
        train,
        &cfg.train,
        &cfg.flow,
        &mut rng,
        logger(log, 2, progress)?,
    )
}

/// Assimilator selected by `assimilator.kind`. A flow checkpoint must match
/// the configured architecture and the dynamics grid.
pub fn build_assimilator(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Assimilator> {
    Ok(match cfg.assimilator.kind {
        AssimilatorKind::Interp => Assimilator::Interp(cfg.assimilator.interp),
        AssimilatorKind::Oi => Assimilator::Oi(cfg.assimilator.oi),
        AssimilatorKind::Flowda => {
            let path = checkpoint.unwrap_or(&cfg.assimilator.checkpoint);
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
                ));
            }
            let d = &cfg.dynamics;
            let (model, _) = load_checkpoint_expecting(path, &cfg.arch(), (d.h, d.w, d.v()))?;
            Assimilator::Flow {
                model: Box::new(model),
                flow: cfg.flow,
            }
        }
    })
}
