//! Acceptance gate for the whole toolkit: eight end-to-end checks, each
//! printing exactly one `PASS`/`FAIL` line, with every numeric bound taken
//! from [`fluxsolve_core::tolerances`]. The binary exits nonzero when any
//! criterion fails, which `cargo test` reports as a failed test target.
//!
//! The checks, in order:
//! 1. grid refinement of the classical schemes against the stored table;
//! 2. discrete conservation on every stock test sample (classical solver,
//!    untrained model, trained model);
//! 3. trained model beats the blended classical baseline by the required
//!    factor after a bounded training run;
//! 4. structural property suite on randomized graphs, plus detection of a
//!    deliberately injected defect;
//! 5. the identity-gate model reproduces the blended classical scheme;
//! 6. scaling, magnitude, reflection and orthogonal-map equivariance;
//! 7. reverse-mode gradients agree with finite differences for every op
//!    and for the fully composed forward step;
//! 8. the secant (Barzilai–Borwein) implicit solver conserves channel
//!    totals on every iterate and contracts on the scalar decay toy.

use std::time::Instant;

use ndarray::Array2;

use fluxsolve_core::autodiff::{op_gradcheck_suite, Tape};
use fluxsolve_core::data::{generate_dataset, DatasetBundle, DatasetConfig};
use fluxsolve_core::fvm::{
    assess_convergence, convergence_study, reference_resolutions, run_fvm, ConvergenceCheck,
    Scheme, TransportParams,
};
use fluxsolve_core::mesh::Mesh;
use fluxsolve_core::metrics::{evaluate, Predictor};
use fluxsolve_core::model::{
    bb_solve, composed_flux_gradcheck, encode_window, flux_rhs, FaceProgram, FluxModel, GateMode,
    ModelConfig, ModelError,
};
use fluxsolve_core::propcheck::{
    all_passed, check_magnitude_equivariance, check_orthogonal_equivariance,
    check_reflection_equivariance, check_scaling_equivariance, run_all, CaseCounts, CheckOutcome,
    InjectedBreak, GRAPH_CHECK_CASES, ORTHOGONAL_CHECK_CASES,
};
use fluxsolve_core::tolerances as tol;
use fluxsolve_core::train::{train, TrainConfig};

/// `Ok` carries the one-line evidence for a passing criterion, `Err` the
/// reason it does not hold.
type Verdict = Result<String, String>;

/// Wall-clock budgets, in seconds, for the timed criteria.
const BUDGET_CONVERGENCE_S: f64 = 10.0;
const BUDGET_CONSERVATION_S: f64 = 30.0;
const BUDGET_TRAINING_S: f64 = 1800.0;
const BUDGET_PROPERTY_SUITE_S: f64 = 60.0;

fn report(number: usize, name: &str, verdict: &Verdict) -> bool {
    match verdict {
        Ok(detail) => {
            println!("PASS  criterion {number}: {name} — {detail}");
            true
        }
        Err(reason) => {
            println!("FAIL  criterion {number}: {name} — {reason}");
            false
        }
    }
}

// ---------------------------------------------------------------------------
// 1. Grid refinement
// ---------------------------------------------------------------------------

/// Every scheme is assessed against the stored error table; a direct match
/// wins, otherwise the closest scheme must at least refine monotonically
/// with a plausible order of accuracy.
fn grid_refinement() -> Verdict {
    let started = Instant::now();
    let resolutions = reference_resolutions();
    let mut matches: Vec<(Scheme, f64)> = Vec::new();
    let mut fallbacks: Vec<(Scheme, f64, f64)> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for scheme in [Scheme::Central, Scheme::Upwind, Scheme::Blended] {
        let rows = convergence_study(scheme, &resolutions).map_err(|e| e.to_string())?;
        match assess_convergence(&rows) {
            ConvergenceCheck::MatchesReference { max_rel_dev } => {
                matches.push((scheme, max_rel_dev));
            }
            ConvergenceCheck::RefinementOnly { slope, residuals } => {
                let max_dev = residuals.iter().cloned().fold(0.0, f64::max);
                fallbacks.push((scheme, slope, max_dev));
            }
            ConvergenceCheck::Failed { reason, .. } => {
                failures.push(format!("{scheme}: {reason}"));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= BUDGET_CONVERGENCE_S {
        return Err(format!(
            "studies took {elapsed:.1} s, budget {BUDGET_CONVERGENCE_S} s"
        ));
    }
    if let Some((scheme, dev)) = matches.iter().min_by(|a, b| a.1.total_cmp(&b.1)) {
        return Ok(format!(
            "{scheme} reproduces the stored table, max deviation {:.1}% (allowed {:.0}%), {elapsed:.1} s",
            dev * 100.0,
            tol::CONVERGENCE_RTOL * 100.0
        ));
    }
    if let Some((scheme, slope, dev)) = fallbacks.iter().min_by(|a, b| a.2.total_cmp(&b.2)) {
        let (lo, hi) = tol::CONVERGENCE_SLOPE_RANGE;
        return Ok(format!(
            "no scheme reproduces the stored table (closest: {scheme}, max deviation {:.0}%); \
             binding fallback holds: errors shrink strictly monotonically with slope {slope:.2} \
             in [{lo}, {hi}], {elapsed:.1} s",
            dev * 100.0
        ));
    }
    Err(format!(
        "every scheme failed refinement: {}",
        failures.join("; ")
    ))
}

// ---------------------------------------------------------------------------
// 2. Conservation on the stock test split
// ---------------------------------------------------------------------------

fn conservation(bundle: &DatasetBundle, trained: &FluxModel) -> Verdict {
    let started = Instant::now();
    let untrained = FluxModel::new(
        ModelConfig {
            u_ref: bundle.test.u_ref,
            ..ModelConfig::default()
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let cases = [
        ("blended scheme", Predictor::Fvm(Scheme::Blended)),
        ("untrained model", Predictor::Model(&untrained)),
        ("trained model", Predictor::Model(trained)),
    ];
    let mut worst: f64 = 0.0;
    for (label, predictor) in &cases {
        let summary = evaluate(predictor, &bundle.test, "test").map_err(|e| e.to_string())?;
        let max_drift = summary
            .per_sample
            .iter()
            .map(|s| s.cons_err)
            .fold(0.0, f64::max);
        if max_drift > tol::CONSERVATION_ABS {
            return Err(format!(
                "{label}: sample drift {max_drift:.3e} exceeds {:.1e}",
                tol::CONSERVATION_ABS
            ));
        }
        worst = worst.max(max_drift);
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= BUDGET_CONSERVATION_S {
        return Err(format!(
            "rollouts took {elapsed:.1} s, budget {BUDGET_CONSERVATION_S} s"
        ));
    }
    Ok(format!(
        "worst per-sample drift {worst:.1e} (bound {:.0e}) across {} predictors on all {} test samples, {elapsed:.1} s",
        tol::CONSERVATION_ABS,
        cases.len(),
        bundle.test.samples.len()
    ))
}

// ---------------------------------------------------------------------------
// 3. Learning gain over the classical baseline
// ---------------------------------------------------------------------------

fn learning_gain(bundle: &DatasetBundle, trained: &FluxModel, train_wall_s: f64) -> Verdict {
    if train_wall_s >= BUDGET_TRAINING_S {
        return Err(format!(
            "training took {train_wall_s:.0} s, budget {BUDGET_TRAINING_S:.0} s"
        ));
    }
    let model =
        evaluate(&Predictor::Model(trained), &bundle.test, "test").map_err(|e| e.to_string())?;
    let baseline = evaluate(&Predictor::Fvm(Scheme::Blended), &bundle.test, "test")
        .map_err(|e| e.to_string())?;
    let ratio = model.mse / baseline.mse;
    if ratio > tol::LEARNING_GAIN_RATIO {
        return Err(format!(
            "trained MSE {:.3e} vs baseline {:.3e}: ratio {ratio:.3} exceeds {}",
            model.mse,
            baseline.mse,
            tol::LEARNING_GAIN_RATIO
        ));
    }
    Ok(format!(
        "trained test MSE {:.2e} vs blended baseline {:.2e}: ratio {ratio:.4} ≤ {} ({train_wall_s:.0} s training)",
        model.mse,
        baseline.mse,
        tol::LEARNING_GAIN_RATIO
    ))
}

// ---------------------------------------------------------------------------
// 4. Structural property suite + injected defect
// ---------------------------------------------------------------------------

fn find<'a>(outcomes: &'a [CheckOutcome], name: &str) -> Result<&'a CheckOutcome, String> {
    outcomes
        .iter()
        .find(|o| o.name == name)
        .ok_or_else(|| format!("check '{name}' missing from the suite"))
}

fn property_suite() -> Verdict {
    let started = Instant::now();
    let stock = run_all(0, CaseCounts::default(), None).map_err(|e| e.to_string())?;
    if !all_passed(&stock) {
        let failing: Vec<&str> = stock.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        return Err(format!("stock checks failing: {}", failing.join(", ")));
    }
    let broken = run_all(
        0,
        CaseCounts::default(),
        Some(InjectedBreak::UnsharedVertexMlp),
    )
    .map_err(|e| e.to_string())?;
    let symmetry = find(&broken, "face-blend-swap-symmetry")?;
    if symmetry.passed {
        return Err("injected unshared-gate defect went undetected".to_string());
    }
    if symmetry.residual <= tol::BREAK_DETECTION_FLOOR {
        return Err(format!(
            "defect residual {:.3e} not clearly above the detection floor {:.0e}",
            symmetry.residual,
            tol::BREAK_DETECTION_FLOOR
        ));
    }
    if let Some(collateral) = broken
        .iter()
        .find(|o| o.name != "face-blend-swap-symmetry" && !o.passed)
    {
        return Err(format!(
            "injected defect spilled into unrelated check '{}'",
            collateral.name
        ));
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= BUDGET_PROPERTY_SUITE_S {
        return Err(format!(
            "suite took {elapsed:.1} s, budget {BUDGET_PROPERTY_SUITE_S} s"
        ));
    }
    let worst = stock.iter().map(|o| o.residual).fold(0.0, f64::max);
    Ok(format!(
        "{} checks pass on {GRAPH_CHECK_CASES} graphs and {ORTHOGONAL_CHECK_CASES} orthogonal maps \
         (worst residual {worst:.1e}); injected defect caught at residual {:.1e}, {elapsed:.1} s",
        stock.len(),
        symmetry.residual
    ))
}

// ---------------------------------------------------------------------------
// 5. Identity-gate model ≡ blended classical scheme
// ---------------------------------------------------------------------------

fn identity_gate_equivalence(bundle: &DatasetBundle) -> Verdict {
    let split = &bundle.test;
    let sample = &split.samples[0];
    let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
    let model = FluxModel::new(
        ModelConfig {
            gate_mode: GateMode::Identity,
            u_ref: split.u_ref,
            ..ModelConfig::default()
        },
        0,
    )
    .map_err(|e| e.to_string())?;
    let steps = 10;
    let model_states = model
        .rollout(
            &split.mesh,
            &params,
            &[],
            &sample.states[0],
            split.dt,
            steps,
            split.u_ref,
        )
        .map_err(|e| e.to_string())?;
    let classical = run_fvm(
        &split.mesh,
        Scheme::Blended,
        &params,
        &[],
        &sample.states[0],
        split.dt,
        steps as f64 * split.dt,
    )
    .map_err(|e| e.to_string())?;
    let mut max_diff: f64 = 0.0;
    for (m_state, f_state) in model_states.iter().zip(&classical.states) {
        for (m, f) in m_state.iter().zip(f_state) {
            max_diff = max_diff.max((m - f).abs());
        }
    }
    if max_diff > tol::IDENTITY_GATE_ABS {
        return Err(format!(
            "max |model − classical| = {max_diff:.3e} exceeds {:.0e} over {steps} steps",
            tol::IDENTITY_GATE_ABS
        ));
    }
    Ok(format!(
        "max |model − classical| = {max_diff:.1e} over {steps} steps (bound {:.0e})",
        tol::IDENTITY_GATE_ABS
    ))
}

// ---------------------------------------------------------------------------
// 6. Equivariance
// ---------------------------------------------------------------------------

fn equivariance() -> Verdict {
    let outcomes = [
        check_scaling_equivariance(0).map_err(|e| e.to_string())?,
        check_magnitude_equivariance(0).map_err(|e| e.to_string())?,
        check_reflection_equivariance(0).map_err(|e| e.to_string())?,
        check_orthogonal_equivariance(0, ORTHOGONAL_CHECK_CASES),
    ];
    if let Some(failing) = outcomes.iter().find(|o| !o.passed) {
        return Err(format!(
            "{} residual {:.3e} exceeds {:.0e}",
            failing.name, failing.residual, failing.bound
        ));
    }
    let worst = outcomes.iter().map(|o| o.residual).fold(0.0, f64::max);
    Ok(format!(
        "space-time scaling, magnitude scaling, reflection and {ORTHOGONAL_CHECK_CASES} orthogonal \
         maps: worst residual {worst:.1e} (bound {:.0e})",
        tol::EQUIVARIANCE_ABS
    ))
}

// ---------------------------------------------------------------------------
// 7. Gradient checks
// ---------------------------------------------------------------------------

fn gradient_checks() -> Verdict {
    let suite = op_gradcheck_suite(tol::GRADCHECK_PROBES, 31415).map_err(|e| e.to_string())?;
    let mut worst_op = ("", 0.0_f64);
    for (name, report) in &suite {
        if report.max_rel_err >= tol::GRADCHECK_REL {
            return Err(format!(
                "op '{name}' gradient error {:.3e} exceeds {:.0e}",
                report.max_rel_err,
                tol::GRADCHECK_REL
            ));
        }
        if report.max_rel_err > worst_op.1 {
            worst_op = (name, report.max_rel_err);
        }
    }
    let composed =
        composed_flux_gradcheck(tol::GRADCHECK_PROBES, tol::GRADCHECK_COMPOSED_STEP, 2718)
            .map_err(|e| e.to_string())?;
    if composed.max_rel_err >= tol::GRADCHECK_REL {
        return Err(format!(
            "composed forward step gradient error {:.3e} exceeds {:.0e}",
            composed.max_rel_err,
            tol::GRADCHECK_REL
        ));
    }
    Ok(format!(
        "{} ops × {} probes, worst {:.1e} ({}); composed step {:.1e} (bound {:.0e})",
        suite.len(),
        tol::GRADCHECK_PROBES,
        worst_op.1,
        worst_op.0,
        composed.max_rel_err,
        tol::GRADCHECK_REL
    ))
}

// ---------------------------------------------------------------------------
// 8. Secant implicit solver
// ---------------------------------------------------------------------------

/// Per-channel totals `Σ_i V_i H[i, ch]` of an encoded state.
fn channel_totals(mesh: &Mesh, h: &Array2<f64>) -> Vec<f64> {
    (0..h.ncols())
        .map(|ch| {
            (0..h.nrows())
                .map(|i| mesh.cell_volumes[i] * h[[i, ch]])
                .sum()
        })
        .collect()
}

fn secant_solver(bundle: &DatasetBundle) -> Verdict {
    let split = &bundle.test;
    let sample = &split.samples[0];
    let params = TransportParams::one_d(sample.velocity, sample.diffusivity);
    let model = FluxModel::new(
        ModelConfig {
            u_ref: split.u_ref,
            ..ModelConfig::default()
        },
        3,
    )
    .map_err(|e| e.to_string())?;
    let prog = FaceProgram::build(&split.mesh, &params, &[], split.dt, split.u_ref)
        .map_err(|e| e.to_string())?;
    let u0 = Array2::from_shape_vec((split.mesh.n_cells, 1), sample.states[0].clone())
        .expect("column state");

    // Re-running with iteration counts 1..=8 visits every intermediate
    // iterate of the deterministic 8-step solve.
    let mut worst_drift: f64 = 0.0;
    for iterations in 1..=8 {
        let tape = Tape::new();
        let vars = model.bind(&tape, false).map_err(|e| e.to_string())?;
        let u0v = tape.constant(u0.clone()).map_err(|e| e.to_string())?;
        let h0 = encode_window(&tape, &vars, &[u0v]).map_err(|e| e.to_string())?;
        let reference = channel_totals(&split.mesh, &tape.value(h0));
        let iterate = bb_solve::<ModelError, _>(&tape, h0, split.dt, iterations, |tape, h| {
            flux_rhs(tape, &vars, &prog, h)
        })
        .map_err(|e| e.to_string())?;
        let totals = channel_totals(&split.mesh, &tape.value(iterate));
        for (t, t0) in totals.iter().zip(&reference) {
            let drift = (t - t0).abs() / t0.abs().max(1.0);
            if drift > tol::SOLVER_ITERATE_REL {
                return Err(format!(
                    "iterate {iterations}: channel-total drift {drift:.3e} exceeds {:.0e}",
                    tol::SOLVER_ITERATE_REL
                ));
            }
            worst_drift = worst_drift.max(drift);
        }
    }

    // Scalar decay toy: rhs(h) = −k·h has the implicit fixed point
    // h0/(1 + kΔt); the residual must shrink monotonically over 8 iterates.
    let (k, dt, h0_value) = (0.5, 0.1, 2.0);
    let fixed_point = h0_value / (1.0 + k * dt);
    let mut residuals = Vec::new();
    for iterations in 1..=8 {
        let tape = Tape::new();
        let h0 = tape
            .constant(Array2::from_elem((1, 1), h0_value))
            .map_err(|e| e.to_string())?;
        let out = bb_solve::<fluxsolve_core::autodiff::TapeError, _>(
            &tape,
            h0,
            dt,
            iterations,
            |tape, h| tape.scalar_mul(h, -k),
        )
        .map_err(|e| e.to_string())?;
        residuals.push((tape.value(out)[[0, 0]] - fixed_point).abs());
    }
    for w in residuals.windows(2) {
        if w[1] > w[0] + 1e-15 {
            return Err(format!("toy residual grew between iterates: {residuals:?}"));
        }
    }
    Ok(format!(
        "channel-total drift {worst_drift:.1e} over 8 iterates (bound {:.0e}); toy residual \
         {:.1e} → {:.1e} monotonically over 8 iterates",
        tol::SOLVER_ITERATE_REL,
        residuals[0],
        residuals[7]
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut all_ok = true;

    all_ok &= report(1, "grid refinement", &grid_refinement());

    // Dataset and trained model are shared by criteria 2 and 3.
    let bundle = match generate_dataset(DatasetConfig::default()) {
        Ok(bundle) => bundle,
        Err(e) => {
            let reason: Verdict = Err(format!("dataset generation failed: {e}"));
            report(2, "discrete conservation", &reason);
            report(3, "learning gain", &reason);
            println!("acceptance: FAILED");
            std::process::exit(1);
        }
    };
    let train_started = Instant::now();
    let trained = train(&TrainConfig::default(), &bundle.train, &bundle.val);
    let train_wall_s = train_started.elapsed().as_secs_f64();
    match &trained {
        Ok((model, _report)) => {
            all_ok &= report(2, "discrete conservation", &conservation(&bundle, model));
            all_ok &= report(
                3,
                "learning gain",
                &learning_gain(&bundle, model, train_wall_s),
            );
        }
        Err(e) => {
            let reason: Verdict = Err(format!("training failed: {e}"));
            all_ok &= report(2, "discrete conservation", &reason);
            all_ok &= report(3, "learning gain", &reason);
        }
    }

    all_ok &= report(4, "structural property suite", &property_suite());
    all_ok &= report(
        5,
        "identity-gate equivalence",
        &identity_gate_equivalence(&bundle),
    );
    all_ok &= report(6, "similarity equivariance", &equivariance());
    all_ok &= report(7, "gradient checks", &gradient_checks());
    all_ok &= report(8, "secant implicit solver", &secant_solver(&bundle));

    if all_ok {
        println!("acceptance: all 8 criteria hold");
    } else {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
}
