//! Executable structural property checks.
//!
//! Each check probes one invariant the solver design is supposed to
//! guarantee *by construction* — conservation under antisymmetric exchange,
//! exact encode/decode inversion, symmetry of the face message under side
//! swap, and equivariance of rollouts under space–time rescaling, mirror
//! reflection, magnitude rescaling and orthogonal maps — and reports the
//! worst observed residual against a pinned bound.
//!
//! A deliberately broken variant of the face message (independent gates for
//! the two sides) can be injected to prove the symmetry check actually
//! rejects asymmetric messages; with the break in place that check is
//! expected to fail, which exercises the suite's detection power.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, TapeError};
use crate::data;
use crate::equivariant::{isotropic_gate_apply, random_orthogonal, MlpParams, SIG_VERTEX};
use crate::fvm::TransportParams;
use crate::mesh::{Mesh, MeshBoundary, MeshError};
use crate::model::{face_blend, FluxModel, GateMode, ModelConfig, ModelError};
use crate::tolerances;

/// Errors raised while *running* checks (not check failures — those are
/// reported as outcomes).
#[derive(Debug, Error)]
pub enum PropcheckError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown break '{0}' (expected unshared-vertex-mlp)")]
    UnknownBreak(String),
}

/// Deliberate defects that can be injected to validate detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedBreak {
    /// Use two independently initialized gates for the two sides of a face,
    /// destroying the swap symmetry of the face message.
    UnsharedVertexMlp,
}

impl std::str::FromStr for InjectedBreak {
    type Err = PropcheckError;

    fn from_str(s: &str) -> Result<InjectedBreak, PropcheckError> {
        match s {
            "unshared-vertex-mlp" => Ok(InjectedBreak::UnsharedVertexMlp),
            other => Err(PropcheckError::UnknownBreak(other.to_string())),
        }
    }
}

impl std::fmt::Display for InjectedBreak {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InjectedBreak::UnsharedVertexMlp => f.write_str("unshared-vertex-mlp"),
        }
    }
}

/// Result of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst residual observed across all cases of the check.
    pub residual: f64,
    /// Bound the residual was held against.
    pub bound: f64,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<42} residual {:.3e} (bound {:.1e}) {}",
            if self.passed { "pass" } else { "FAIL" },
            self.name,
            self.residual,
            self.bound,
            self.detail
        )
    }
}

impl CheckOutcome {
    fn from_residual(name: &'static str, residual: f64, bound: f64, detail: String) -> Self {
        CheckOutcome {
            name,
            passed: residual <= bound,
            residual,
            bound,
            detail,
        }
    }
}

/// Random graphs probed by the exchange-conservation check.
pub const GRAPH_CHECK_CASES: usize = 200;
/// Random orthogonal maps probed by the isotropic-gate check.
pub const ORTHOGONAL_CHECK_CASES: usize = 100;

/// How many randomized cases each check runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseCounts {
    pub graphs: usize,
    pub orthogonal_maps: usize,
}

impl Default for CaseCounts {
    fn default() -> Self {
        CaseCounts {
            graphs: GRAPH_CHECK_CASES,
            orthogonal_maps: ORTHOGONAL_CHECK_CASES,
        }
    }
}

impl CaseCounts {
    /// Uses `n` cases for every randomized check.
    pub fn uniform(n: usize) -> CaseCounts {
        CaseCounts {
            graphs: n,
            orthogonal_maps: n,
        }
    }
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Exchange conservation on arbitrary graphs: if every edge contributes an
/// antisymmetric message pair (`+m` to one endpoint, `−m` to the other) on
/// top of an identity update, the feature total over vertices is invariant
/// no matter what function produced the messages.
pub fn check_exchange_conservation(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(2..=30);
        let n_edges = rng.gen_range(1..=2 * n);
        let h = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        // Arbitrary smooth two-argument message kernel.
        let a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
        let b = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
        let kernel = |hi: ndarray::ArrayView1<f64>, hj: ndarray::ArrayView1<f64>| {
            let lin = hi.dot(&a);
            let gate = hj.dot(&b).mapv(f64::tanh);
            &lin * &gate
        };
        let mut next = h.clone();
        for _ in 0..n_edges {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n);
            while j == i {
                j = rng.gen_range(0..n);
            }
            let m = &kernel(h.row(i), h.row(j)) - &kernel(h.row(j), h.row(i));
            for (k, &v) in m.iter().enumerate() {
                next[[i, k]] += v;
                next[[j, k]] -= v;
            }
        }
        for k in 0..d {
            let before: f64 = h.column(k).sum();
            let after: f64 = next.column(k).sum();
            let scale = before.abs().max(1.0);
            worst = worst.max((after - before).abs() / scale);
        }
    }
    CheckOutcome::from_residual(
        "exchange-conservation-random-graphs",
        worst,
        tolerances::STRUCTURAL_DRIFT_REL,
        format!("{cases} graphs, 2–30 vertices"),
    )
}

/// Encoding and decoding are linear maps: mixing states before or after the
/// codec gives the same features and the same reconstructions.
pub fn check_codec_linearity(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FluxModel::new(ModelConfig::default(), rng.gen())?;
    let n = 12;
    let d = model.config.encoded_dim;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let alpha: f64 = rng.gen_range(-2.0..2.0);
        let beta: f64 = rng.gen_range(-2.0..2.0);
        let mix: Vec<f64> = u
            .iter()
            .zip(&v)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let encode = |state: &[f64]| -> Array2<f64> {
            let mut out = Array2::zeros((n, d));
            for (i, &s) in state.iter().enumerate() {
                for j in 0..d {
                    out[[i, j]] = s * model.enc_u[[0, j]];
                }
            }
            out
        };
        let hu = encode(&u);
        let hv = encode(&v);
        let hmix = encode(&mix);
        for i in 0..n {
            for j in 0..d {
                let expected = alpha * hu[[i, j]] + beta * hv[[i, j]];
                worst = worst.max((hmix[[i, j]] - expected).abs());
            }
        }
    }
    Ok(CheckOutcome::from_residual(
        "codec-linearity",
        worst,
        tolerances::ROUNDTRIP_ABS,
        "20 random state mixes".into(),
    ))
}

/// decode ∘ encode as the identity, for freshly derived decoders over
/// randomly perturbed encoders and several window widths.
pub fn check_codec_roundtrip(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for bundle in [1usize, 2, 4] {
        let mut model = FluxModel::new(
            ModelConfig {
                bundle,
                ..ModelConfig::default()
            },
            rng.gen(),
        )?;
        model.enc_u.mapv_inplace(|v| v + rng.gen_range(-0.05..0.05));
        model.refresh_decoder()?;
        worst = worst.max(model.decoder_residual());
    }
    Ok(CheckOutcome::from_residual(
        "codec-roundtrip",
        worst,
        tolerances::ROUNDTRIP_ABS,
        "window widths 1, 2, 4 with perturbed encoders".into(),
    ))
}

/// Swap symmetry of the face message: evaluating the blend from the other
/// side of the face (owner and neighbor exchanged, interpolation weights
/// exchanged, same donor) must give the identical message. With the
/// unshared-gate break injected this symmetry is destroyed, and the check
/// is expected to report a residual far above the bound.
pub fn check_face_blend_symmetry(
    seed: u64,
    inject: Option<InjectedBreak>,
) -> Result<CheckOutcome, PropcheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let m = 24;
    let tape = Tape::new();
    let shared = MlpParams::new_gate(d, &mut rng);
    let other = MlpParams::new_gate(d, &mut rng);
    let linear = MlpParams::new_gate(d, &mut rng);
    let upwind = MlpParams::new_gate(d, &mut rng);
    let bind = |p: &MlpParams| -> Result<_, TapeError> {
        Ok(crate::equivariant::GateVars::Learned(
            crate::equivariant::MlpVars::bind_const(&tape, p)?,
        ))
    };
    let g_shared = bind(&shared)?;
    let g_other = bind(&other)?;
    let g_linear = bind(&linear)?;
    let g_upwind = bind(&upwind)?;
    let rand_mat =
        |rng: &mut ChaCha8Rng| Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
    let hi_val = rand_mat(&mut rng);
    let hj_val = rand_mat(&mut rng);
    let w_val = Array2::from_shape_fn((m, 1), |_| rng.gen_range(0.2..0.8));
    let hi = tape.constant(hi_val)?;
    let hj = tape.constant(hj_val)?;
    let w_own = tape.constant(w_val.clone())?;
    let w_nb = tape.constant(w_val.mapv(|w| 1.0 - w))?;
    let hlin_owner_view = tape.add(tape.mul(w_own, hi)?, tape.mul(w_nb, hj)?)?;
    let hlin_neighbor_view = tape.add(tape.mul(w_nb, hj)?, tape.mul(w_own, hi)?)?;
    // The donor cell is a property of the face, not of the viewing side.
    let hup = hi;
    let sigma = SIG_VERTEX.sigma(crate::equivariant::ReferenceScales {
        dx: 0.1,
        dt: 0.1,
        u_ref: 1.0,
    });
    let (own_gate, nb_gate) = match inject {
        None => (g_shared, g_shared),
        Some(InjectedBreak::UnsharedVertexMlp) => (g_shared, g_other),
    };
    let from_owner = face_blend(
        &tape,
        own_gate,
        nb_gate,
        g_linear,
        g_upwind,
        hi,
        hj,
        hlin_owner_view,
        hup,
        sigma,
    )?;
    let from_neighbor = face_blend(
        &tape,
        own_gate,
        nb_gate,
        g_linear,
        g_upwind,
        hj,
        hi,
        hlin_neighbor_view,
        hup,
        sigma,
    )?;
    let a = tape.value(from_owner);
    let b = tape.value(from_neighbor);
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((x - y).abs());
    }
    let detail = match inject {
        None => format!("{m} random faces, width {d}"),
        Some(brk) => format!("{m} random faces, width {d}, injected break: {brk}"),
    };
    Ok(CheckOutcome::from_residual(
        "face-blend-swap-symmetry",
        worst,
        tolerances::STRUCTURAL_DRIFT_REL,
        detail,
    ))
}

fn stock_setup(seed: u64) -> Result<(Mesh, FluxModel, Vec<f64>), PropcheckError> {
    let mesh = Mesh::interval(10, 1.0, MeshBoundary::Periodic)?;
    let model = FluxModel::new(ModelConfig::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let u0: Vec<f64> = (0..mesh.n_cells)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Ok((mesh, model, u0))
}

/// Space–time rescaling equivariance: stretching the mesh by `λ` and the
/// step by `τ` while mapping the transport coefficients as `c → (λ/τ)·c`,
/// `D → (λ²/τ)·D` leaves every gate input dimensionless-identical, so the
/// predicted states must be unchanged.
pub fn check_scaling_equivariance(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let (mesh, model, u0) = stock_setup(seed)?;
    let (lambda, tau) = (2.3, 1.7);
    let (c, diff, dt, steps) = (0.15, 1e-3, 0.1, 6);
    let base = model.rollout(
        &mesh,
        &TransportParams::one_d(c, diff),
        &[],
        &u0,
        dt,
        steps,
        1.0,
    )?;
    let stretched_mesh = Mesh::interval(10, lambda, MeshBoundary::Periodic)?;
    let scaled = model.rollout(
        &stretched_mesh,
        &TransportParams::one_d(lambda / tau * c, lambda * lambda / tau * diff),
        &[],
        &u0,
        tau * dt,
        steps,
        1.0,
    )?;
    let worst = max_abs_diff(&base, &scaled);
    Ok(CheckOutcome::from_residual(
        "space-time-scaling-equivariance",
        worst,
        tolerances::EQUIVARIANCE_ABS,
        format!("λ={lambda}, τ={tau}, {steps} steps"),
    ))
}

/// Magnitude equivariance: scaling the initial state and the reference
/// magnitude together scales every prediction by the same factor.
pub fn check_magnitude_equivariance(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let (mesh, model, u0) = stock_setup(seed.wrapping_add(1))?;
    let s = 3.7;
    let (c, diff, dt, steps) = (0.12, 1e-3, 0.1, 6);
    let params = TransportParams::one_d(c, diff);
    let base = model.rollout(&mesh, &params, &[], &u0, dt, steps, 1.0)?;
    let scaled_u0: Vec<f64> = u0.iter().map(|v| s * v).collect();
    let scaled = model.rollout(&mesh, &params, &[], &scaled_u0, dt, steps, s)?;
    let mut worst = 0.0f64;
    for (ra, rb) in base.iter().zip(&scaled) {
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((s * x - y).abs() / s);
        }
    }
    Ok(CheckOutcome::from_residual(
        "magnitude-equivariance",
        worst,
        tolerances::EQUIVARIANCE_ABS,
        format!("scale {s}, {steps} steps"),
    ))
}

/// Mirror equivariance on the periodic interval: reflecting the initial
/// state (reversing cell order) and negating the velocity must produce the
/// reflection of the original prediction at every step.
pub fn check_reflection_equivariance(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let (mesh, model, u0) = stock_setup(seed.wrapping_add(2))?;
    let (c, diff, dt, steps) = (0.17, 1e-3, 0.1, 6);
    let forward = model.rollout(
        &mesh,
        &TransportParams::one_d(c, diff),
        &[],
        &u0,
        dt,
        steps,
        1.0,
    )?;
    let mirrored_u0: Vec<f64> = u0.iter().rev().copied().collect();
    let mirrored = model.rollout(
        &mesh,
        &TransportParams::one_d(-c, diff),
        &[],
        &mirrored_u0,
        dt,
        steps,
        1.0,
    )?;
    let mirrored_back: Vec<Vec<f64>> = mirrored
        .iter()
        .map(|state| state.iter().rev().copied().collect())
        .collect();
    let worst = max_abs_diff(&forward, &mirrored_back);
    Ok(CheckOutcome::from_residual(
        "reflection-equivariance",
        worst,
        tolerances::EQUIVARIANCE_ABS,
        format!("{steps} steps, velocity ±{c}"),
    ))
}

/// Orthogonal equivariance of the isotropic vector-feature gate: the gate
/// commutes with any orthogonal map applied to the feature rows, because it
/// only reads row norms.
pub fn check_orthogonal_equivariance(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mlp = MlpParams::new_gate(8, &mut rng);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = if case % 2 == 0 { 2 } else { 3 };
        let q = random_orthogonal(n, &mut rng);
        let h = Array2::from_shape_fn((6, n), |_| rng.gen_range(-2.0..2.0));
        let sigma = 1.3;
        let gated_then_rotated = isotropic_gate_apply(&mlp, &h, sigma).dot(&q);
        let rotated_then_gated = isotropic_gate_apply(&mlp, &h.dot(&q), sigma);
        for (a, b) in gated_then_rotated.iter().zip(rotated_then_gated.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckOutcome::from_residual(
        "orthogonal-equivariance-vector-gate",
        worst,
        tolerances::EQUIVARIANCE_ABS,
        format!("{cases} random orthogonal maps, 2D and 3D"),
    )
}

/// Flux-form conservation of the untrained and identity-gate networks on
/// closed-form trajectories: volume-weighted totals must be invariant step
/// by step.
pub fn check_model_conservation(seed: u64) -> Result<CheckOutcome, PropcheckError> {
    let mesh = Mesh::interval(10, 1.0, MeshBoundary::Periodic)?;
    let mut worst = 0.0f64;
    for (gate_mode, model_seed) in [(GateMode::Identity, 0), (GateMode::Learned, seed)] {
        let model = FluxModel::new(
            ModelConfig {
                gate_mode,
                ..ModelConfig::default()
            },
            model_seed,
        )?;
        let u0 = data::sample_on_mesh(&mesh, 0.0, 0.2, 1e-4, 0.9, 0.3);
        let states = model.rollout(
            &mesh,
            &TransportParams::one_d(0.2, 1e-4),
            &[],
            &u0,
            0.1,
            10,
            1.0,
        )?;
        let t0 = crate::fvm::total_quantity(&mesh, &states[0]);
        for state in &states {
            let t = crate::fvm::total_quantity(&mesh, state);
            worst = worst.max((t - t0).abs() / t0.abs().max(1.0));
        }
    }
    Ok(CheckOutcome::from_residual(
        "model-rollout-conservation",
        worst,
        tolerances::CONSERVATION_STEP_REL,
        "identity and learned gates, 10 steps".into(),
    ))
}

/// Runs every check. With a break injected, the corresponding check is
/// *supposed* to fail; callers treat any failed outcome as a property
/// failure, which is exactly the observable behavior the injection is
/// meant to demonstrate.
pub fn run_all(
    seed: u64,
    cases: CaseCounts,
    inject: Option<InjectedBreak>,
) -> Result<Vec<CheckOutcome>, PropcheckError> {
    Ok(vec![
        check_exchange_conservation(seed, cases.graphs),
        check_codec_linearity(seed)?,
        check_codec_roundtrip(seed)?,
        check_face_blend_symmetry(seed, inject)?,
        check_model_conservation(seed)?,
        check_scaling_equivariance(seed)?,
        check_magnitude_equivariance(seed)?,
        check_reflection_equivariance(seed)?,
        check_orthogonal_equivariance(seed, cases.orthogonal_maps),
    ])
}

/// True when every outcome passed.
pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}
