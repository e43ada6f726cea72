//! Scale-aware nonlinear gates.
//!
//! Every nonlinearity in the flux network is a *gate*: a scalar multiplier
//! computed from the norm of a feature row divided by a reference scale.
//! Because the multiplier depends only on the dimensionless ratio
//! `‖h‖ / σ`, rescaling the problem (grid spacing, step size, velocity,
//! diffusivity) and rescaling `σ` accordingly leaves the gate unchanged, so
//! predictions transform exactly like the physical fields they represent.
//! The same construction with row-wise vector norms is rotation-equivariant,
//! since a norm is unchanged by any orthogonal map.
//!
//! Reference scales are expressed as integer exponents over the triple
//! `(Δx, Δt, U)` — grid spacing, step size and a reference field magnitude —
//! so each gated quantity carries its physical dimension explicitly.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeError, Var};

/// Physical dimension of a gated quantity, as exponents over
/// `(Δx, Δt, U)`. The reference scale is `Δx^dx · Δt^dt · U^u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSignature {
    pub dx: i32,
    pub dt: i32,
    pub u: i32,
}

/// Cell-value features: dimension of the field itself.
pub const SIG_VERTEX: DimensionSignature = DimensionSignature { dx: 0, dt: 0, u: 1 };
/// Convective flux features: field × velocity.
pub const SIG_CONV_FLUX: DimensionSignature = DimensionSignature {
    dx: 1,
    dt: -1,
    u: 1,
};
/// Face-gradient features: field / length.
pub const SIG_GRADIENT: DimensionSignature = DimensionSignature {
    dx: -1,
    dt: 0,
    u: 1,
};

/// Concrete values for the three reference quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScales {
    pub dx: f64,
    pub dt: f64,
    pub u_ref: f64,
}

impl DimensionSignature {
    /// The scale `σ = Δx^dx · Δt^dt · U^u` for the given references.
    pub fn sigma(&self, scales: ReferenceScales) -> f64 {
        scales.dx.powi(self.dx) * scales.dt.powi(self.dt) * scales.u_ref.powi(self.u)
    }
}

/// Two-layer perceptron parameters (`tanh` after each layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// First layer weights, `hidden × in`.
    #[serde(with = "crate::f17::arr2")]
    pub w1: Array2<f64>,
    /// First layer bias, `1 × hidden`.
    #[serde(with = "crate::f17::arr2")]
    pub b1: Array2<f64>,
    /// Second layer weights, `out × hidden`.
    #[serde(with = "crate::f17::arr2")]
    pub w2: Array2<f64>,
    /// Second layer bias, `1 × out`.
    #[serde(with = "crate::f17::arr2")]
    pub b2: Array2<f64>,
}

/// Weight scale for freshly initialized perceptrons.
pub const INIT_WEIGHT_RANGE: f64 = 0.1;
/// Initial final-layer bias of gate perceptrons; puts fresh gates near
/// `tanh(1.5) ≈ 0.905` so an untrained network transports most of each flux.
pub const GATE_INIT_BIAS: f64 = 1.5;

impl MlpParams {
    /// Uniform `±`[`INIT_WEIGHT_RANGE`] weights, zero biases.
    pub fn new_random(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> MlpParams {
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| {
                rng.gen_range(-INIT_WEIGHT_RANGE..INIT_WEIGHT_RANGE)
            })
        };
        MlpParams {
            w1: draw(hidden, in_dim),
            b1: Array2::zeros((1, hidden)),
            w2: draw(out_dim, hidden),
            b2: Array2::zeros((1, out_dim)),
        }
    }

    /// A scalar→scalar gate network (`1 → hidden → 1`) whose output starts
    /// near `tanh(`[`GATE_INIT_BIAS`]`)` regardless of input.
    pub fn new_gate(hidden: usize, rng: &mut impl Rng) -> MlpParams {
        let mut p = MlpParams::new_random(1, hidden, 1, rng);
        p.b2[[0, 0]] = GATE_INIT_BIAS;
        p
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.w1.dim(), self.b1.dim(), self.w2.dim(), self.b2.dim()]
    }

    /// Untracked forward pass (no tape): `tanh(tanh(x·w1ᵀ + b1)·w2ᵀ + b2)`.
    pub fn eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        (h.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh)
    }
}

/// Tape handles for one perceptron's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    /// Records the parameters as trainable leaves.
    pub fn bind(tape: &Tape, p: &MlpParams) -> Result<MlpVars, TapeError> {
        Ok(MlpVars {
            w1: tape.leaf(p.w1.clone())?,
            b1: tape.leaf(p.b1.clone())?,
            w2: tape.leaf(p.w2.clone())?,
            b2: tape.leaf(p.b2.clone())?,
        })
    }

    /// Records the parameters as frozen constants.
    pub fn bind_const(tape: &Tape, p: &MlpParams) -> Result<MlpVars, TapeError> {
        Ok(MlpVars {
            w1: tape.constant(p.w1.clone())?,
            b1: tape.constant(p.b1.clone())?,
            w2: tape.constant(p.w2.clone())?,
            b2: tape.constant(p.b2.clone())?,
        })
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Tracked forward pass of a two-layer `tanh` perceptron.
pub fn mlp_forward(tape: &Tape, mlp: &MlpVars, x: Var) -> Result<Var, TapeError> {
    let h = tape.tanh(tape.add(tape.linear(mlp.w1, x)?, mlp.b1)?)?;
    tape.tanh(tape.add(tape.linear(mlp.w2, h)?, mlp.b2)?)
}

/// Gate behaviour for one activation site.
#[derive(Debug, Clone)]
pub enum Gate {
    /// Pass features through unchanged. With every gate set to identity the
    /// network computes exactly the classical discretization it mirrors.
    Identity,
    /// Multiply each feature row by a learned function of `‖row‖ / σ`.
    /// Boxed so the enum stays pointer-sized next to the empty variant.
    Learned(Box<MlpParams>),
}

impl Gate {
    pub fn params(&self) -> Option<&MlpParams> {
        match self {
            Gate::Identity => None,
            Gate::Learned(p) => Some(p),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut MlpParams> {
        match self {
            Gate::Identity => None,
            Gate::Learned(p) => Some(p),
        }
    }
}

/// Tape-bound gate.
#[derive(Debug, Clone, Copy)]
pub enum GateVars {
    Identity,
    Learned(MlpVars),
}

impl GateVars {
    pub fn bind(tape: &Tape, gate: &Gate) -> Result<GateVars, TapeError> {
        Ok(match gate {
            Gate::Identity => GateVars::Identity,
            Gate::Learned(p) => GateVars::Learned(MlpVars::bind(tape, p)?),
        })
    }

    pub fn bind_const(tape: &Tape, gate: &Gate) -> Result<GateVars, TapeError> {
        Ok(match gate {
            Gate::Identity => GateVars::Identity,
            Gate::Learned(p) => GateVars::Learned(MlpVars::bind_const(tape, p)?),
        })
    }
}

/// Applies a scale-aware gate to each row of `h`.
///
/// The gate input is `‖h_row‖ / σ`, a dimensionless number; the gate output
/// multiplies the whole row. Identity gates return `h` unchanged (the same
/// tape node, so downstream arithmetic is bitwise identical to the ungated
/// computation).
pub fn similarity_gate(tape: &Tape, gate: GateVars, h: Var, sigma: f64) -> Result<Var, TapeError> {
    match gate {
        GateVars::Identity => Ok(h),
        GateVars::Learned(mlp) => {
            let norms = tape.l2_norm_rows(h)?;
            let scaled = tape.scalar_mul(norms, 1.0 / sigma)?;
            let g = mlp_forward(tape, &mlp, scaled)?;
            tape.mul(h, g)
        }
    }
}

/// Untracked gate over rows interpreted as geometric vectors: each row is
/// multiplied by `gate(‖row‖ / σ)`. Row norms are invariant under any
/// orthogonal map, so this commutes with rotations and reflections.
pub fn isotropic_gate_apply(mlp: &MlpParams, h: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let mut out = h.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x = Array2::from_elem((1, 1), norm / sigma);
        let g = mlp.eval(&x)[[0, 0]];
        row.mapv_inplace(|v| v * g);
    }
    out
}

/// A uniformly random orthogonal matrix (Gram–Schmidt on a random Gaussian
/// matrix via Box–Muller draws). Used by rotation-equivariance checks.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((n, n), |_| {
            // Box–Muller standard normal.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let mut ok = true;
        for k in 0..n {
            for prev in 0..k {
                let proj: f64 = (0..n).map(|i| m[[i, k]] * m[[i, prev]]).sum();
                for i in 0..n {
                    let delta = proj * m[[i, prev]];
                    m[[i, k]] -= delta;
                }
            }
            let norm: f64 = (0..n).map(|i| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                m[[i, k]] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}
