//! Training loop for the learned-flux model.
//!
//! Each optimizer step backpropagates through one sample's *entire* rollout
//! (all time steps on one tape), so gradients account for the compounding
//! of autoregressive errors. Sample order is reshuffled every epoch from a
//! seeded generator; the whole loop is deterministic for fixed seeds.
//!
//! Safeguards around the loop:
//!
//! * before training starts, an identity-gate twin of the network is rolled
//!   out against the classical blended solver — if the two disagree the
//!   surrounding pipeline is miswired and training refuses to run;
//! * after every parameter update the decoder is recomputed from the
//!   encoder and its inversion residual is checked, so a drifting encoder
//!   can never silently break decode ∘ encode;
//! * a non-finite loss aborts immediately with the epoch and sample seed;
//! * the mean train loss must strictly decrease over the first five epochs.
//!   One retry at half the learning rate is attempted; a second violation
//!   is a hard error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, OptimError, Tape, TapeError, Var};
use crate::data::{Sample, SplitData};
use crate::f17;
use crate::fvm::{self, Scheme, TransportParams};
use crate::metrics::{self, mse_loss, MetricsError, Predictor};
use crate::model::{forward_next, FaceProgram, FluxModel, GateMode, ModelConfig, ModelError};
use crate::tolerances;

/// Errors that abort a training run.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("validation split is empty")]
    ValidationSplitEmpty,
    #[error(
        "identity-gate network deviates from the blended classical solver by {deviation:.3e}; \
         the flux pipeline is miswired"
    )]
    PipelineMismatch { deviation: f64 },
    #[error("loss became non-finite at epoch {epoch}, sample seed {sample_seed}")]
    NonFiniteLoss { epoch: usize, sample_seed: u64 },
    #[error(
        "decoder inversion residual {residual:.3e} after update at epoch {epoch} exceeds the \
         roundtrip bound"
    )]
    DecoderDrift { epoch: usize, residual: f64 },
    #[error(
        "train loss failed to decrease strictly over the first {epochs} epochs (at learning \
         rate {lr:.3e}, after {attempts} attempt(s))"
    )]
    NotLearning {
        epochs: usize,
        lr: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Number of leading epochs whose mean train loss must strictly decrease.
pub const EARLY_PROGRESS_EPOCHS: usize = 5;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Seed for parameter initialization.
    pub model_seed: u64,
    /// Seed for the per-epoch sample shuffle.
    pub shuffle_seed: u64,
    pub epochs: usize,
    #[serde(with = "f17::scalar")]
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            model_seed: 0,
            shuffle_seed: 0,
            epochs: 30,
            lr: 1e-3,
        }
    }
}

/// One epoch's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample rollout loss over the epoch (parameters move within
    /// the epoch, so this is the usual online training loss).
    #[serde(with = "f17::scalar")]
    pub train_loss: f64,
    /// Validation MSE of the model as of the end of the epoch.
    #[serde(with = "f17::scalar")]
    pub val_mse: f64,
    #[serde(with = "f17::scalar")]
    pub lr: f64,
    #[serde(with = "f17::scalar")]
    pub wall_s: f64,
}

/// Column layout of the per-epoch training log.
pub const TRAIN_CSV_HEADER: &str = "epoch,train_loss,val_mse,lr,wall_s";

/// Renders the per-epoch log as CSV.
pub fn training_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for log in logs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            log.epoch,
            f17::literal(log.train_loss),
            f17::literal(log.val_mse),
            f17::literal(log.lr),
            f17::literal(log.wall_s),
        ));
    }
    out
}

/// Outcome of a completed training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    #[serde(with = "f17::scalar")]
    pub best_val_mse: f64,
    /// Learning rate actually used (halved once if the first attempt failed
    /// the early-progress gate).
    #[serde(with = "f17::scalar")]
    pub lr_used: f64,
    pub retried: bool,
}

/// Builds the full-rollout loss for one sample on `tape` and returns it
/// with its value. The window starts as `bundle` copies of the stored
/// initial state; every predicted state feeds the next step.
pub fn sample_rollout_loss(
    tape: &Tape,
    vars: &crate::model::ModelVars,
    prog: &FaceProgram,
    sample: &Sample,
) -> Result<(Var, f64), TrainError> {
    let to_col = |v: &[f64]| -> Result<Var, TapeError> {
        tape.constant(ndarray::Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("shape"))
    };
    let u0 = to_col(&sample.states[0])?;
    let mut window: Vec<Var> = vec![u0; vars.bundle()];
    let mut preds = Vec::with_capacity(sample.states.len() - 1);
    for _ in 1..sample.states.len() {
        let next = forward_next(tape, vars, prog, &window)?;
        preds.push(next);
        window.remove(0);
        window.push(next);
    }
    let refs: Vec<Var> = sample.states[1..]
        .iter()
        .map(|s| to_col(s))
        .collect::<Result<_, _>>()?;
    let loss = mse_loss(tape, &preds, &refs)?;
    let value = tape.value(loss)[[0, 0]];
    Ok((loss, value))
}

/// Verifies that an identity-gate twin of `config` reproduces the blended
/// classical solver on the given sample. Run before training to prove the
/// surrounding machinery (encoding, face program, scatter, decoding) is
/// wired correctly.
pub fn identity_pipeline_check(
    config: ModelConfig,
    split: &SplitData,
    sample: &Sample,
) -> Result<(), TrainError> {
    let identity = FluxModel::new(
        ModelConfig {
            gate_mode: GateMode::Identity,
            bundle: 1,
            ..config
        },
        0,
    )?;
    let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
    let steps = split.n_steps();
    let t_end = steps as f64 * split.dt;
    let classical = fvm::run_fvm(
        &split.mesh,
        Scheme::Blended,
        &params,
        &[],
        &sample.states[0],
        split.dt,
        t_end,
    )
    .map_err(MetricsError::Fvm)?;
    let learned = identity.rollout(
        &split.mesh,
        &params,
        &[],
        &sample.states[0],
        split.dt,
        steps,
        split.u_ref,
    )?;
    let mut deviation = 0.0f64;
    for (a, b) in classical
        .states
        .iter()
        .flatten()
        .zip(learned.iter().flatten())
    {
        deviation = deviation.max((a - b).abs());
    }
    if deviation > tolerances::IDENTITY_GATE_ABS {
        return Err(TrainError::PipelineMismatch { deviation });
    }
    Ok(())
}

struct Attempt {
    logs: Vec<EpochLog>,
    best: (usize, f64, FluxModel),
}

enum AttemptOutcome {
    // Boxed: the finished attempt carries the whole best model.
    Done(Box<Attempt>),
    Stalled { after_epochs: usize },
}

fn run_attempt(
    config: &TrainConfig,
    train_split: &SplitData,
    val_split: &SplitData,
    lr: f64,
) -> Result<AttemptOutcome, TrainError> {
    let mut model = FluxModel::new(config.model, config.model_seed)?;
    let shapes: Vec<_> = model.param_refs().iter().map(|p| p.dim()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut logs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, FluxModel)> = None;
    let n_steps = train_split.n_steps();
    debug_assert!(n_steps >= 1);

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_split.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for &idx in &order {
            let sample = &train_split.samples[idx];
            let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
            let prog = FaceProgram::build(
                &train_split.mesh,
                &params,
                &[],
                train_split.dt,
                train_split.u_ref,
            )?;
            let tape = Tape::new();
            let vars = model.bind(&tape, true)?;
            let (loss, loss_value) = sample_rollout_loss(&tape, &vars, &prog, sample)?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    sample_seed: sample.seed,
                });
            }
            loss_sum += loss_value;
            let grads = tape.backward(loss)?;
            let collected = vars.collect_grads(&grads);
            let grad_refs: Vec<Option<&ndarray::Array2<f64>>> =
                collected.iter().map(|g| g.as_ref()).collect();
            let mut param_refs = model.param_refs_mut();
            adam.step(&mut param_refs, &grad_refs)?;
            model.refresh_decoder()?;
            let residual = model.decoder_residual();
            if residual > tolerances::ROUNDTRIP_ABS {
                return Err(TrainError::DecoderDrift { epoch, residual });
            }
        }
        let train_loss = loss_sum / order.len() as f64;

        let val = metrics::evaluate(&Predictor::Model(&model), val_split, "val")?;
        if best.as_ref().map_or(true, |(_, m, _)| val.mse < *m) {
            best = Some((epoch, val.mse, model.clone()));
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_mse: val.mse,
            lr,
            wall_s: started.elapsed().as_secs_f64(),
        });

        // Early-progress gate: each of the first few epochs must improve on
        // the one before it.
        let checked = EARLY_PROGRESS_EPOCHS.min(config.epochs);
        if epoch > 0 && epoch < checked && logs[epoch].train_loss >= logs[epoch - 1].train_loss {
            return Ok(AttemptOutcome::Stalled {
                after_epochs: epoch + 1,
            });
        }
    }
    let best = best.expect("at least one epoch ran");
    Ok(AttemptOutcome::Done(Box::new(Attempt { logs, best })))
}

/// Trains a fresh model on `train_split`, tracking validation MSE after
/// every epoch. Returns the best-validation model (with its decoder
/// freshly recomputed) and the full per-epoch record.
pub fn train(
    config: &TrainConfig,
    train_split: &SplitData,
    val_split: &SplitData,
) -> Result<(FluxModel, TrainReport), TrainError> {
    if train_split.samples.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if val_split.samples.is_empty() {
        return Err(TrainError::ValidationSplitEmpty);
    }
    identity_pipeline_check(config.model, train_split, &train_split.samples[0])?;

    // Zero epochs: the result is the initialization itself.
    if config.epochs == 0 {
        let model = FluxModel::new(config.model, config.model_seed)?;
        let val = metrics::evaluate(&Predictor::Model(&model), val_split, "val")?;
        let report = TrainReport {
            logs: Vec::new(),
            best_epoch: 0,
            best_val_mse: val.mse,
            lr_used: config.lr,
            retried: false,
        };
        return Ok((model, report));
    }

    let mut lr = config.lr;
    let mut retried = false;
    let attempt = loop {
        match run_attempt(config, train_split, val_split, lr)? {
            AttemptOutcome::Done(done) => break *done,
            AttemptOutcome::Stalled { after_epochs } => {
                if retried {
                    return Err(TrainError::NotLearning {
                        epochs: after_epochs,
                        lr,
                        attempts: 2,
                    });
                }
                retried = true;
                lr /= 2.0;
            }
        }
    };
    let (best_epoch, best_val_mse, model) = attempt.best;
    let report = TrainReport {
        logs: attempt.logs,
        best_epoch,
        best_val_mse,
        lr_used: lr,
        retried,
    };
    Ok((model, report))
}
