//! Trajectory error measures and dataset-level evaluation.
//!
//! Two quantities summarize a predicted trajectory against its reference:
//! the mean squared error over all post-initial states, and the
//! time-integrated drift of the volume-weighted total (which is exactly
//! zero for any flux-form method up to rounding). Dataset evaluation runs
//! a predictor over every sample of a split and reports means with
//! standard errors, in a fixed CSV layout.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Var};
use crate::data::{DataError, SplitData};
use crate::f17;
use crate::fvm::{self, Scheme, TransportParams};
use crate::mesh::Mesh;
use crate::model::{FluxModel, ModelError};

/// Errors from metric computation or evaluation runs.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectories have different shapes: {0}")]
    ShapeMismatch(String),
    #[error("need at least one post-initial state")]
    NoSteps,
    #[error("split has no samples")]
    EmptySplit,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fvm(#[from] crate::fvm::FvmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean squared error over steps `1..T` and all cells; the shared initial
/// state is excluded.
pub fn mse(predicted: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted states vs {} reference states",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(MetricsError::NoSteps);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (p, r)) in predicted.iter().zip(reference).enumerate().skip(1) {
        if p.len() != r.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "step {t}: {} cells vs {}",
                p.len(),
                r.len()
            )));
        }
        for (a, b) in p.iter().zip(r) {
            total += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Time-integrated absolute drift of the volume-weighted total:
/// `Σ_{t≥1} Δt · |Σ_i V_i (u_i(t) − u_i(0))|`.
pub fn conservation_error(mesh: &Mesh, states: &[Vec<f64>], dt: f64) -> Result<f64, MetricsError> {
    signed_drift_terms(mesh, states, dt).map(|terms| terms.iter().map(|d| d.abs()).sum())
}

/// Signed variant: `Σ_{t≥1} Δt · (Σ_i V_i (u_i(t) − u_i(0)))`. Cancels
/// oscillating drift, so the absolute form is the default report.
pub fn conservation_error_signed(
    mesh: &Mesh,
    states: &[Vec<f64>],
    dt: f64,
) -> Result<f64, MetricsError> {
    signed_drift_terms(mesh, states, dt).map(|terms| terms.iter().sum())
}

fn signed_drift_terms(mesh: &Mesh, states: &[Vec<f64>], dt: f64) -> Result<Vec<f64>, MetricsError> {
    let first = states.first().ok_or(MetricsError::NoSteps)?;
    if states.len() < 2 {
        return Err(MetricsError::NoSteps);
    }
    let total0 = fvm::total_quantity(mesh, first);
    Ok(states[1..]
        .iter()
        .map(|u| dt * (fvm::total_quantity(mesh, u) - total0))
        .collect())
}

/// Sample standard error of the mean (`ddof = 1`); zero for a single value.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (var / n as f64).sqrt()
}

/// Tracked mean squared error: `preds` are per-step `n×1` predictions for
/// steps `1..T`, `refs` the matching reference columns (recorded as
/// constants). Returns a scalar loss variable.
pub fn mse_loss(tape: &Tape, preds: &[Var], refs: &[Var]) -> Result<Var, TapeError> {
    assert_eq!(preds.len(), refs.len(), "prediction/reference step counts");
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (p, r) in preds.iter().zip(refs) {
        let diff = tape.sub(*p, *r)?;
        let sq = tape.sum_all(tape.mul(diff, diff)?)?;
        count += tape.shape(*r).0;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    let acc = acc.expect("at least one step");
    tape.scalar_mul(acc, 1.0 / count as f64)
}

/// What produces predicted trajectories during evaluation.
pub enum Predictor<'a> {
    /// Classical finite-volume run with the given face scheme.
    Fvm(Scheme),
    /// Learned-flux model rollout.
    Model(&'a FluxModel),
}

impl Predictor<'_> {
    /// Stable method label used in reports.
    pub fn label(&self) -> String {
        match self {
            Predictor::Fvm(scheme) => format!("fvm-{scheme}"),
            Predictor::Model(_) => "model".to_string(),
        }
    }

    fn rollout(
        &self,
        mesh: &Mesh,
        params: &TransportParams,
        u0: &[f64],
        dt: f64,
        steps: usize,
        u_ref: f64,
    ) -> Result<Vec<Vec<f64>>, MetricsError> {
        match self {
            Predictor::Fvm(scheme) => {
                let t_end = steps as f64 * dt;
                Ok(fvm::run_fvm(mesh, *scheme, params, &[], u0, dt, t_end)?.states)
            }
            Predictor::Model(model) => {
                Ok(model.rollout(mesh, params, &[], u0, dt, steps, u_ref)?)
            }
        }
    }
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub seed: u64,
    #[serde(with = "f17::scalar")]
    pub mse: f64,
    #[serde(with = "f17::scalar")]
    pub cons_err: f64,
}

/// Aggregate evaluation of one predictor over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub dataset: String,
    pub n_samples: usize,
    #[serde(with = "f17::scalar")]
    pub mse: f64,
    #[serde(with = "f17::scalar")]
    pub mse_sem: f64,
    #[serde(with = "f17::scalar")]
    pub cons_err: f64,
    #[serde(with = "f17::scalar")]
    pub cons_err_sem: f64,
    #[serde(with = "f17::scalar")]
    pub wall_s: f64,
    pub per_sample: Vec<SampleMetrics>,
}

/// Fixed column layout of evaluation CSV files.
pub const CSV_HEADER: &str = "method,dataset,mse,mse_sem,cons_err,cons_err_sem,wall_s";

impl EvalSummary {
    /// One CSV row matching [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            f17::literal(self.mse),
            f17::literal(self.mse_sem),
            f17::literal(self.cons_err),
            f17::literal(self.cons_err_sem),
            f17::literal(self.wall_s),
        )
    }
}

/// Renders a header plus one row per summary.
pub fn csv_report(summaries: &[EvalSummary]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

/// Runs `predictor` over every sample of `split`: each sample's stored
/// initial state is rolled forward `n_steps` times and compared against the
/// stored trajectory.
pub fn evaluate(
    predictor: &Predictor<'_>,
    split: &SplitData,
    dataset_label: &str,
) -> Result<EvalSummary, MetricsError> {
    if split.samples.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let steps = split.n_steps();
    let start = Instant::now();
    let mut per_sample = Vec::with_capacity(split.samples.len());
    for sample in &split.samples {
        let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
        let predicted = predictor.rollout(
            &split.mesh,
            &params,
            &sample.states[0],
            split.dt,
            steps,
            split.u_ref,
        )?;
        per_sample.push(SampleMetrics {
            seed: sample.seed,
            mse: mse(&predicted, &sample.states)?,
            cons_err: conservation_error(&split.mesh, &predicted, split.dt)?,
        });
    }
    let wall_s = start.elapsed().as_secs_f64();
    let mses: Vec<f64> = per_sample.iter().map(|s| s.mse).collect();
    let cons: Vec<f64> = per_sample.iter().map(|s| s.cons_err).collect();
    Ok(EvalSummary {
        method: predictor.label(),
        dataset: dataset_label.to_string(),
        n_samples: per_sample.len(),
        mse: mses.iter().sum::<f64>() / mses.len() as f64,
        mse_sem: sem(&mses),
        cons_err: cons.iter().sum::<f64>() / cons.len() as f64,
        cons_err_sem: sem(&cons),
        wall_s,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::mesh::MeshBoundary;
    use crate::model::{GateMode, ModelConfig};

    fn small_split(n: usize) -> SplitData {
        let config = DatasetConfig {
            n_train: n,
            n_val: 1,
            n_test: 1,
            seed: 7,
        };
        generate_dataset(config).unwrap().train
    }

    #[test]
    fn mse_matches_a_hand_computed_case() {
        let reference = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let predicted = vec![vec![9.0, 9.0], vec![1.5, 1.0], vec![2.0, -1.0]];
        // Step 0 ignored; squared errors 0.25, 0, 0, 1 over 4 entries.
        let got = mse(&predicted, &reference).unwrap();
        assert!((got - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn mse_rejects_mismatched_shapes() {
        let a = vec![vec![0.0], vec![1.0]];
        let b = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(mse(&a, &b), Err(MetricsError::ShapeMismatch(_))));
        let c = vec![vec![0.0]];
        assert!(matches!(mse(&c, &c), Err(MetricsError::NoSteps)));
    }

    #[test]
    fn conservation_error_is_zero_for_flux_form_runs() {
        let split = small_split(3);
        let sample = &split.samples[0];
        let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
        let run = fvm::run_fvm(
            &split.mesh,
            Scheme::Blended,
            &params,
            &[],
            &sample.states[0],
            split.dt,
            1.0,
        )
        .unwrap();
        let err = conservation_error(&split.mesh, &run.states, split.dt).unwrap();
        assert!(err < 1e-14, "flux-form drift {err:.3e}");
    }

    #[test]
    fn injected_uniform_drift_is_measured_exactly() {
        // Unit-volume mesh, 10 steps of dt = 0.1. Adding ε to every cell
        // from t = 0.5 onward changes the total by ε on 6 of the 10
        // post-initial states, so the integrated drift is 0.6·ε.
        let mesh = Mesh::interval(10, 1.0, MeshBoundary::Periodic).unwrap();
        let dt = 0.1;
        let eps = 1e-3;
        let base = vec![0.25; mesh.n_cells];
        let states: Vec<Vec<f64>> = (0..=10)
            .map(|t| {
                let bump = if t as f64 * dt >= 0.5 { eps } else { 0.0 };
                base.iter().map(|u| u + bump).collect()
            })
            .collect();
        let err = conservation_error(&mesh, &states, dt).unwrap();
        assert!((err - 0.6 * eps).abs() < 1e-15, "got {err}");
        let signed = conservation_error_signed(&mesh, &states, dt).unwrap();
        assert!((signed - 0.6 * eps).abs() < 1e-15);
        // A ±ε alternating drift cancels in the signed form only.
        let alternating: Vec<Vec<f64>> = (0..=10)
            .map(|t| {
                let bump = if t == 0 {
                    0.0
                } else if t % 2 == 1 {
                    eps
                } else {
                    -eps
                };
                base.iter().map(|u| u + bump).collect()
            })
            .collect();
        let abs_err = conservation_error(&mesh, &alternating, dt).unwrap();
        let signed_err = conservation_error_signed(&mesh, &alternating, dt).unwrap();
        assert!((abs_err - 1.0 * eps).abs() < 1e-15);
        assert!(signed_err.abs() < eps * 0.11);
    }

    #[test]
    fn sem_matches_the_textbook_formula() {
        let values = [1.0, 2.0, 3.0, 4.0];
        // std with ddof 1 = sqrt(5/3), sem = sqrt(5/3)/2.
        let expected = (5.0f64 / 3.0).sqrt() / 2.0;
        assert!((sem(&values) - expected).abs() < 1e-15);
        assert_eq!(sem(&[42.0]), 0.0);
    }

    #[test]
    fn tracked_mse_matches_the_untracked_value() {
        let tape = Tape::new();
        let reference = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let predicted = vec![vec![9.0, 9.0], vec![1.5, 1.0], vec![2.0, -1.0]];
        let to_col = |v: &[f64]| {
            tape.constant(ndarray::Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap())
                .unwrap()
        };
        let preds: Vec<Var> = predicted[1..].iter().map(|v| to_col(v)).collect();
        let refs: Vec<Var> = reference[1..].iter().map(|v| to_col(v)).collect();
        let loss = mse_loss(&tape, &preds, &refs).unwrap();
        let untracked = mse(&predicted, &reference).unwrap();
        assert!((tape.value(loss)[[0, 0]] - untracked).abs() < 1e-15);
    }

    #[test]
    fn evaluate_covers_every_sample_and_labels_the_method() {
        let split = small_split(4);
        let summary = evaluate(&Predictor::Fvm(Scheme::Blended), &split, "train").unwrap();
        assert_eq!(summary.method, "fvm-blended");
        assert_eq!(summary.dataset, "train");
        assert_eq!(summary.n_samples, 4);
        assert_eq!(summary.per_sample.len(), 4);
        assert!(summary.mse > 0.0);
        assert!(summary.cons_err < 1e-13);
        assert!(summary.wall_s >= 0.0);
    }

    #[test]
    fn model_predictor_evaluates_and_conserves() {
        let split = small_split(2);
        let model = FluxModel::new(
            ModelConfig {
                gate_mode: GateMode::Identity,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        let fvm_summary = evaluate(&Predictor::Fvm(Scheme::Blended), &split, "train").unwrap();
        let model_summary = evaluate(&Predictor::Model(&model), &split, "train").unwrap();
        assert_eq!(model_summary.method, "model");
        // Identity gates make the model the blended scheme, so the two MSEs
        // agree to rounding.
        assert!((model_summary.mse - fvm_summary.mse).abs() <= 1e-12 * fvm_summary.mse.max(1e-30));
        assert!(model_summary.cons_err < 1e-13);
    }

    #[test]
    fn csv_layout_is_pinned() {
        assert_eq!(
            CSV_HEADER,
            "method,dataset,mse,mse_sem,cons_err,cons_err_sem,wall_s"
        );
        let summary = EvalSummary {
            method: "fvm-upwind".into(),
            dataset: "test".into(),
            n_samples: 1,
            mse: 0.5,
            mse_sem: 0.0,
            cons_err: 0.0,
            cons_err_sem: 0.0,
            wall_s: 1.25,
            per_sample: vec![],
        };
        let text = csv_report(std::slice::from_ref(&summary));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let row = lines.next().unwrap();
        assert!(row.starts_with("fvm-upwind,test,5.0000000000000000e-1,"));
        assert_eq!(row.split(',').count(), 7);
    }
}
