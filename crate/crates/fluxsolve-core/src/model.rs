//! Learned face-flux network over finite-volume meshes.
//!
//! The model keeps the finite-volume update skeleton — encode cell values,
//! estimate one flux per face, scatter each flux with opposite signs into
//! the two adjacent cells, divide by volumes, step — and replaces the face
//! reconstruction with gated feature blends. Conservation is structural:
//! fluxes are computed once per face and exchanged antisymmetrically, so no
//! training state can change the volume-weighted total. Scale awareness is
//! structural too: every nonlinearity is a [`similarity_gate`] whose input
//! is dimensionless.
//!
//! The encoder is linear per time segment; the decoder is the per-segment
//! left inverse of the encoder, recomputed from it whenever it changes, so
//! decode ∘ encode is the identity and decoded predictions inherit the
//! conservation of the encoded ones. With every gate set to identity and
//! fresh uniform encoders, the network reproduces the classical blended
//! scheme to rounding error, which pins the whole pipeline to a classical
//! oracle.
//!
//! Time integration is explicit Euler or a fixed-point iteration on the
//! implicit-Euler residual with secant (Barzilai–Borwein) step lengths.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradCheckReport, Gradients, Tape, TapeError, Var};
use crate::equivariant::{
    similarity_gate, DimensionSignature, Gate, GateVars, MlpParams, ReferenceScales, SIG_CONV_FLUX,
    SIG_GRADIENT, SIG_VERTEX,
};
use crate::f17;
use crate::fvm::{face_interp_weights, FvmError, TransportParams};
use crate::mesh::{BoundaryKind, CellRef, Mesh, MeshError};
use crate::tolerances;

/// Errors from model construction, evaluation and persistence.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fvm(#[from] FvmError),
    #[error("flux for face {face} became non-finite in op {op}")]
    NonFiniteFlux { face: usize, op: &'static str },
    #[error("encoder segment {segment} has near-zero norm; decoder undefined")]
    DegenerateEncoder { segment: usize },
    #[error("stored decoder fails the inversion check (residual {residual:.3e})")]
    CorruptDecoder { residual: f64 },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("window holds {got} states but the bundle width is {expected}")]
    WindowLength { expected: usize, got: usize },
}

/// Time integrator for the encoded update.
///
/// Serialized as its textual form (`"explicit"` or `"bb:N"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// `h' = h + Δt·rhs(h)`.
    Explicit,
    /// Fixed-point iteration on the implicit-Euler residual
    /// `R(H) = H − h − Δt·rhs(H)` with secant step lengths.
    Bb { iterations: usize },
}

impl Serialize for SolverKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SolverKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<SolverKind, String> {
        if s == "explicit" {
            return Ok(SolverKind::Explicit);
        }
        if let Some(n) = s.strip_prefix("bb:") {
            let iterations: usize = n
                .parse()
                .map_err(|_| format!("invalid iteration count '{n}'"))?;
            if iterations == 0 {
                return Err("bb solver needs at least one iteration".into());
            }
            return Ok(SolverKind::Bb { iterations });
        }
        Err(format!("unknown solver '{s}' (expected explicit or bb:N)"))
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverKind::Explicit => f.write_str("explicit"),
            SolverKind::Bb { iterations } => write!(f, "bb:{iterations}"),
        }
    }
}

/// Whether activation sites gate or pass through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// All gates are identity: the network *is* the blended classical
    /// scheme (used as a structural oracle).
    Identity,
    /// All gates are learned scalar networks.
    Learned,
}

/// Dimension signatures of the three gated feature families, recorded in
/// checkpoints for auditability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSignatures {
    pub vertex: DimensionSignature,
    pub conv_flux: DimensionSignature,
    pub gradient: DimensionSignature,
}

impl Default for GateSignatures {
    fn default() -> Self {
        GateSignatures {
            vertex: SIG_VERTEX,
            conv_flux: SIG_CONV_FLUX,
            gradient: SIG_GRADIENT,
        }
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the encoded feature space.
    pub encoded_dim: usize,
    /// Number of time segments the encoder is split into (window width).
    pub bundle: usize,
    pub solver: SolverKind,
    pub gate_mode: GateMode,
    /// Reference field magnitude for dimensionless gate inputs.
    #[serde(with = "f17::scalar")]
    pub u_ref: f64,
    #[serde(default)]
    pub signatures: GateSignatures,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoded_dim: 64,
            bundle: 1,
            solver: SolverKind::Explicit,
            gate_mode: GateMode::Learned,
            u_ref: 1.0,
            signatures: GateSignatures::default(),
        }
    }
}

impl ModelConfig {
    /// Columns per time segment.
    pub fn segment_dim(&self) -> usize {
        self.encoded_dim / self.bundle
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.encoded_dim == 0 || self.bundle == 0 {
            return Err(ModelError::Config(
                "encoded_dim and bundle must be positive".into(),
            ));
        }
        if self.encoded_dim % self.bundle != 0 {
            return Err(ModelError::Config(format!(
                "encoded_dim {} not divisible by bundle {}",
                self.encoded_dim, self.bundle
            )));
        }
        if !(self.u_ref > 0.0) {
            return Err(ModelError::Config(format!(
                "u_ref must be positive, got {}",
                self.u_ref
            )));
        }
        if let SolverKind::Bb { iterations: 0 } = self.solver {
            return Err(ModelError::Config("bb solver needs iterations ≥ 1".into()));
        }
        Ok(())
    }
}

/// The learned-flux model: linear per-segment encoders for the transported
/// field, linear encoders for the transport coefficients, five gate
/// networks, a temporal smoothing weight, and the derived decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxModel {
    pub config: ModelConfig,
    /// Field encoder, one row per time segment (`bundle × segment_dim`).
    #[serde(with = "f17::arr2")]
    pub enc_u: Array2<f64>,
    /// Velocity encoder (`1 × encoded_dim`).
    #[serde(with = "f17::arr2")]
    pub enc_c: Array2<f64>,
    /// Diffusivity encoder (`1 × encoded_dim`).
    #[serde(with = "f17::arr2")]
    pub enc_d: Array2<f64>,
    /// Gate applied to raw cell features on both sides of a face (shared,
    /// which is what makes the face message symmetric under side swap).
    pub gate_vertex: Gate,
    /// Gate applied to the centrally interpolated face feature.
    pub gate_linear: Gate,
    /// Gate applied to the donor-cell face feature.
    pub gate_upwind: Gate,
    /// Gate applied to the assembled convective flux feature.
    pub gate_conv: Gate,
    /// Gate applied to the face-gradient feature.
    pub gate_grad: Gate,
    /// Temporal smoothing weight (`1 × 1`; 1.0 is pass-through).
    #[serde(with = "f17::arr2")]
    pub bundle_w: Array2<f64>,
    /// Derived decoder (`bundle × encoded_dim`), zero outside each
    /// segment's columns. Refreshed from `enc_u`, never trained.
    #[serde(with = "f17::arr2")]
    pub decoder: Array2<f64>,
}

/// Gate serialization: externally tagged (`"identity"` or
/// `{"learned": {...}}`) so the numeric payload streams straight through
/// the JSON reader without intermediate buffering.
impl Serialize for Gate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        #[serde(rename_all = "snake_case")]
        enum Wire<'a> {
            Identity,
            Learned(&'a MlpParams),
        }
        match self {
            Gate::Identity => Wire::Identity.serialize(s),
            Gate::Learned(p) => Wire::Learned(p).serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Gate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(rename_all = "snake_case")]
        enum Wire {
            Identity,
            Learned(Box<MlpParams>),
        }
        Ok(match Wire::deserialize(d)? {
            Wire::Identity => Gate::Identity,
            Wire::Learned(params) => Gate::Learned(params),
        })
    }
}

impl PartialEq for Gate {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Gate::Identity, Gate::Identity) => true,
            (Gate::Learned(a), Gate::Learned(b)) => a == b,
            _ => false,
        }
    }
}

impl FluxModel {
    /// Builds a freshly initialized model.
    ///
    /// Field-encoder entries start at `1/√encoded_dim` (uniform energy,
    /// exactly invertible); coefficient encoders start at all-ones so the
    /// decoded identity-gate flux matches the classical scheme exactly;
    /// gate networks draw from the seeded RNG in the order vertex, linear,
    /// upwind, conv, grad.
    pub fn new(config: ModelConfig, seed: u64) -> Result<FluxModel, ModelError> {
        config.validate()?;
        let d = config.encoded_dim;
        let seg = config.segment_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = |rng: &mut ChaCha8Rng| match config.gate_mode {
            GateMode::Identity => Gate::Identity,
            GateMode::Learned => Gate::Learned(Box::new(MlpParams::new_gate(d, rng))),
        };
        let mut model = FluxModel {
            config,
            enc_u: Array2::from_elem((config.bundle, seg), 1.0 / (d as f64).sqrt()),
            enc_c: Array2::ones((1, d)),
            enc_d: Array2::ones((1, d)),
            gate_vertex: gate(&mut rng),
            gate_linear: gate(&mut rng),
            gate_upwind: gate(&mut rng),
            gate_conv: gate(&mut rng),
            gate_grad: gate(&mut rng),
            bundle_w: Array2::from_elem((1, 1), 1.0),
            decoder: Array2::zeros((config.bundle, d)),
        };
        model.refresh_decoder()?;
        Ok(model)
    }

    /// Recomputes the decoder as the per-segment left inverse of the field
    /// encoder: segment row `ε / ‖ε‖²`, zero-padded to full width.
    pub fn refresh_decoder(&mut self) -> Result<(), ModelError> {
        let seg = self.config.segment_dim();
        let mut decoder = Array2::zeros((self.config.bundle, self.config.encoded_dim));
        for k in 0..self.config.bundle {
            let row = self.enc_u.row(k);
            let norm_sq: f64 = row.iter().map(|v| v * v).sum();
            if norm_sq < tolerances::DECODER_MIN_NORM_SQ {
                return Err(ModelError::DegenerateEncoder { segment: k });
            }
            for (j, &e) in row.iter().enumerate() {
                decoder[[k, k * seg + j]] = e / norm_sq;
            }
        }
        self.decoder = decoder;
        Ok(())
    }

    /// Worst decode∘encode deviation from identity over probe values, all
    /// segments. Zero (to rounding) whenever the decoder is fresh.
    pub fn decoder_residual(&self) -> f64 {
        let seg = self.config.segment_dim();
        let mut worst = 0.0f64;
        for value in [1.0, -0.75, 0.3125] {
            for k in 0..self.config.bundle {
                // Encoded segment k of a window whose k-th state is `value`
                // and whose other states are zero.
                let mut decoded = 0.0;
                for j in 0..seg {
                    decoded += value * self.enc_u[[k, j]] * self.decoder[[k, k * seg + j]];
                }
                worst = worst.max((decoded - value).abs());
                // Off-segment columns must not leak into segment k.
                for kk in 0..self.config.bundle {
                    if kk != k {
                        let leak: f64 = (0..seg)
                            .map(|j| value * self.enc_u[[kk, j]] * self.decoder[[k, kk * seg + j]])
                            .sum();
                        worst = worst.max(leak.abs());
                    }
                }
            }
        }
        worst
    }

    /// Trainable parameter tensors, in the fixed optimizer order.
    pub fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = vec![&self.enc_u, &self.enc_c, &self.enc_d];
        for gate in [
            &self.gate_vertex,
            &self.gate_linear,
            &self.gate_upwind,
            &self.gate_conv,
            &self.gate_grad,
        ] {
            if let Some(p) = gate.params() {
                out.extend([&p.w1, &p.b1, &p.w2, &p.b2]);
            }
        }
        out.push(&self.bundle_w);
        out
    }

    /// Mutable view of the same tensors, same order as [`param_refs`].
    ///
    /// [`param_refs`]: FluxModel::param_refs
    pub fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.enc_u, &mut self.enc_c, &mut self.enc_d];
        for gate in [
            &mut self.gate_vertex,
            &mut self.gate_linear,
            &mut self.gate_upwind,
            &mut self.gate_conv,
            &mut self.gate_grad,
        ] {
            if let Some(p) = gate.params_mut() {
                out.push(&mut p.w1);
                out.push(&mut p.b1);
                out.push(&mut p.w2);
                out.push(&mut p.b2);
            }
        }
        out.push(&mut self.bundle_w);
        out
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a stored model and re-verifies its structure: configuration
    /// consistency, tensor shapes, and that the stored decoder still
    /// inverts the stored encoder within [`tolerances::ROUNDTRIP_ABS`].
    pub fn from_json(text: &str) -> Result<FluxModel, ModelError> {
        let model: FluxModel = serde_json::from_str(text)?;
        model.config.validate()?;
        let d = model.config.encoded_dim;
        let seg = model.config.segment_dim();
        let k = model.config.bundle;
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(ModelError::Config(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )))
            }
        };
        expect("enc_u", model.enc_u.dim(), (k, seg))?;
        expect("enc_c", model.enc_c.dim(), (1, d))?;
        expect("enc_d", model.enc_d.dim(), (1, d))?;
        expect("bundle_w", model.bundle_w.dim(), (1, 1))?;
        expect("decoder", model.decoder.dim(), (k, d))?;
        let residual = model.decoder_residual();
        if residual > tolerances::ROUNDTRIP_ABS {
            return Err(ModelError::CorruptDecoder { residual });
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Mesh preprocessing
// ---------------------------------------------------------------------------

struct InteriorFaces {
    face_ids: Vec<usize>,
    owners: Vec<usize>,
    neighbors: Vec<usize>,
    /// Donor cell per face: owner when the normal velocity is outbound or
    /// zero, neighbor otherwise.
    donors: Vec<usize>,
    w_own: Vec<f64>,
    w_nb: Vec<f64>,
    dist: Vec<f64>,
    area: Vec<f64>,
    nx: Vec<f64>,
    cx: Vec<f64>,
}

struct BoundaryFaces {
    face_ids: Vec<usize>,
    owners: Vec<usize>,
    constraint: Vec<f64>,
    dist: Vec<f64>,
    area: Vec<f64>,
    nx: Vec<f64>,
    cx: Vec<f64>,
}

impl BoundaryFaces {
    fn empty() -> BoundaryFaces {
        BoundaryFaces {
            face_ids: Vec::new(),
            owners: Vec::new(),
            constraint: Vec::new(),
            dist: Vec::new(),
            area: Vec::new(),
            nx: Vec::new(),
            cx: Vec::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.face_ids.is_empty()
    }
}

/// Everything about one (mesh, transport, step-size) combination the model
/// needs per forward pass, precomputed once.
pub struct FaceProgram {
    pub n_cells: usize,
    pub dt: f64,
    pub diffusivity: f64,
    pub scales: ReferenceScales,
    interior: InteriorFaces,
    dirichlet: BoundaryFaces,
    neumann: BoundaryFaces,
    volumes: Vec<f64>,
}

impl FaceProgram {
    /// Precomputes per-face geometry, interpolation weights, donor choices
    /// and boundary constraints for the given transport setup.
    pub fn build(
        mesh: &Mesh,
        params: &TransportParams,
        boundary_values: &[f64],
        dt: f64,
        u_ref: f64,
    ) -> Result<FaceProgram, ModelError> {
        if !(dt > 0.0) {
            return Err(ModelError::Fvm(FvmError::NonPositiveDt(dt)));
        }
        let dim = mesh.cell_centroids.first().map_or(1, Vec::len);
        if params.velocity.len() != dim {
            return Err(ModelError::Fvm(FvmError::VelocityDimension {
                expected: dim,
                got: params.velocity.len(),
            }));
        }
        let mut interior = InteriorFaces {
            face_ids: Vec::new(),
            owners: Vec::new(),
            neighbors: Vec::new(),
            donors: Vec::new(),
            w_own: Vec::new(),
            w_nb: Vec::new(),
            dist: Vec::new(),
            area: Vec::new(),
            nx: Vec::new(),
            cx: Vec::new(),
        };
        let mut dirichlet = BoundaryFaces::empty();
        let mut neumann = BoundaryFaces::empty();
        for (f, face) in mesh.faces.iter().enumerate() {
            let cn = params.normal_velocity(&face.normal);
            match face.neighbor {
                CellRef::Cell(j) => {
                    let geo = mesh.face_geometry(f)?;
                    let dist = geo.d_vec.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (w_own, w_nb) = face_interp_weights(mesh, f)?;
                    interior.face_ids.push(f);
                    interior.owners.push(face.owner);
                    interior.neighbors.push(j);
                    interior.donors.push(if cn >= 0.0 { face.owner } else { j });
                    interior.w_own.push(w_own);
                    interior.w_nb.push(w_nb);
                    interior.dist.push(dist);
                    interior.area.push(face.area);
                    interior.nx.push(face.normal[0]);
                    interior.cx.push(params.velocity[0]);
                }
                CellRef::Virtual(slot) => {
                    let kind = mesh.boundary_kind(slot).ok_or(ModelError::Fvm(
                        FvmError::MissingBoundaryValue {
                            slot,
                            available: boundary_values.len(),
                        },
                    ))?;
                    let constraint = *boundary_values.get(slot).ok_or(ModelError::Fvm(
                        FvmError::MissingBoundaryValue {
                            slot,
                            available: boundary_values.len(),
                        },
                    ))?;
                    let batch = match kind {
                        BoundaryKind::Dirichlet => &mut dirichlet,
                        BoundaryKind::Neumann => &mut neumann,
                    };
                    batch.face_ids.push(f);
                    batch.owners.push(face.owner);
                    batch.constraint.push(constraint);
                    batch.dist.push(mesh.owner_to_face_distance(f)?);
                    batch.area.push(face.area);
                    batch.nx.push(face.normal[0]);
                    batch.cx.push(params.velocity[0]);
                }
            }
        }
        Ok(FaceProgram {
            n_cells: mesh.n_cells,
            dt,
            diffusivity: params.diffusivity,
            scales: ReferenceScales {
                dx: mesh.dx(),
                dt,
                u_ref,
            },
            interior,
            dirichlet,
            neumann,
            volumes: mesh.cell_volumes.clone(),
        })
    }

    fn sigma(&self, sig: DimensionSignature) -> f64 {
        sig.sigma(self.scales)
    }
}

// ---------------------------------------------------------------------------
// Tape-bound model
// ---------------------------------------------------------------------------

/// Tape handles for one bound model.
pub struct ModelVars {
    config: ModelConfig,
    /// One `(1 × segment_dim)` encoder row per time segment.
    enc_u_segments: Vec<Var>,
    /// All segments concatenated (`1 × encoded_dim`).
    enc_u_full: Var,
    enc_c: Var,
    enc_d: Var,
    pub gate_vertex: GateVars,
    pub gate_linear: GateVars,
    pub gate_upwind: GateVars,
    pub gate_conv: GateVars,
    pub gate_grad: GateVars,
    bundle_w: Var,
    decoder_rows: Vec<Var>,
}

impl ModelVars {
    /// Window width (number of time segments) of the bound model.
    pub fn bundle(&self) -> usize {
        self.config.bundle
    }

    /// Trainable handles in the same order as [`FluxModel::param_refs`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(&self.enc_u_segments);
        out.push(self.enc_c);
        out.push(self.enc_d);
        for gate in [
            self.gate_vertex,
            self.gate_linear,
            self.gate_upwind,
            self.gate_conv,
            self.gate_grad,
        ] {
            if let GateVars::Learned(mlp) = gate {
                out.extend(mlp.vars());
            }
        }
        out.push(self.bundle_w);
        out
    }

    /// Collects gradients for every trainable tensor, merging the
    /// per-segment encoder gradients back into one `(bundle × segment_dim)`
    /// tensor so they line up with [`FluxModel::param_refs`].
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Array2<f64>>> {
        let seg = self.config.segment_dim();
        let mut enc_u_grad: Option<Array2<f64>> = None;
        for (k, v) in self.enc_u_segments.iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                let acc =
                    enc_u_grad.get_or_insert_with(|| Array2::zeros((self.config.bundle, seg)));
                for j in 0..seg {
                    acc[[k, j]] += g[[0, j]];
                }
            }
        }
        let mut out: Vec<Option<Array2<f64>>> = vec![enc_u_grad];
        let push_var = |out: &mut Vec<Option<Array2<f64>>>, v: Var| {
            out.push(grads.get(v).cloned());
        };
        push_var(&mut out, self.enc_c);
        push_var(&mut out, self.enc_d);
        for gate in [
            self.gate_vertex,
            self.gate_linear,
            self.gate_upwind,
            self.gate_conv,
            self.gate_grad,
        ] {
            if let GateVars::Learned(mlp) = gate {
                for v in mlp.vars() {
                    push_var(&mut out, v);
                }
            }
        }
        push_var(&mut out, self.bundle_w);
        out
    }
}

fn face_err(err: TapeError, face_ids: &[usize]) -> ModelError {
    match err {
        TapeError::NonFinite { op, row } => ModelError::NonFiniteFlux {
            face: face_ids.get(row).copied().unwrap_or(row),
            op,
        },
        other => ModelError::Tape(other),
    }
}

fn col(tape: &Tape, values: &[f64]) -> Result<Var, TapeError> {
    tape.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("shape"))
}

impl FluxModel {
    /// Records the model's parameters on a tape: as leaves when
    /// `trainable`, as constants otherwise. The decoder is always constant.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<ModelVars, ModelError> {
        let seg = self.config.segment_dim();
        let record = |v: Array2<f64>| -> Result<Var, TapeError> {
            if trainable {
                tape.leaf(v)
            } else {
                tape.constant(v)
            }
        };
        let mut enc_u_segments = Vec::with_capacity(self.config.bundle);
        for k in 0..self.config.bundle {
            let row = self
                .enc_u
                .row(k)
                .to_owned()
                .into_shape_with_order((1, seg))
                .expect("row shape");
            enc_u_segments.push(record(row)?);
        }
        let enc_u_full = tape.concat_features(&enc_u_segments)?;
        let bind_gate = |gate: &Gate| -> Result<GateVars, TapeError> {
            if trainable {
                GateVars::bind(tape, gate)
            } else {
                GateVars::bind_const(tape, gate)
            }
        };
        let mut decoder_rows = Vec::with_capacity(self.config.bundle);
        for k in 0..self.config.bundle {
            let row = self
                .decoder
                .row(k)
                .to_owned()
                .into_shape_with_order((1, self.config.encoded_dim))
                .expect("row shape");
            decoder_rows.push(tape.constant(row)?);
        }
        Ok(ModelVars {
            config: self.config,
            enc_u_segments,
            enc_u_full,
            enc_c: record(self.enc_c.clone())?,
            enc_d: record(self.enc_d.clone())?,
            gate_vertex: bind_gate(&self.gate_vertex)?,
            gate_linear: bind_gate(&self.gate_linear)?,
            gate_upwind: bind_gate(&self.gate_upwind)?,
            gate_conv: bind_gate(&self.gate_conv)?,
            gate_grad: bind_gate(&self.gate_grad)?,
            bundle_w: record(self.bundle_w.clone())?,
            decoder_rows,
        })
    }
}

/// Encodes a window of column states (`bundle` entries of shape
/// `n_cells × 1`, oldest first) into one `n_cells × encoded_dim` feature
/// block: segment `k`'s columns carry window entry `k`.
pub fn encode_window(tape: &Tape, vars: &ModelVars, window: &[Var]) -> Result<Var, ModelError> {
    if window.len() != vars.config.bundle {
        return Err(ModelError::WindowLength {
            expected: vars.config.bundle,
            got: window.len(),
        });
    }
    let mut parts = Vec::with_capacity(window.len());
    for (state, enc) in window.iter().zip(&vars.enc_u_segments) {
        parts.push(tape.mul(*state, *enc)?);
    }
    Ok(tape.concat_features(&parts)?)
}

/// Decodes segment `k` of an encoded block back to a column state.
pub fn decode_segment(tape: &Tape, vars: &ModelVars, h: Var, k: usize) -> Result<Var, ModelError> {
    Ok(tape.linear(vars.decoder_rows[k], h)?)
}

/// The symmetric face message: the even blend of the gated owner feature,
/// gated neighbor feature, gated central interpolation and gated donor
/// feature. `gate_own` and `gate_nb` are the *same* gate in the real model;
/// passing two different gates (only done by the negative-control check)
/// breaks the swap symmetry.
#[allow(clippy::too_many_arguments)]
pub fn face_blend(
    tape: &Tape,
    gate_own: GateVars,
    gate_nb: GateVars,
    gate_linear: GateVars,
    gate_upwind: GateVars,
    h_own: Var,
    h_nb: Var,
    h_lin: Var,
    h_up: Var,
    sigma_vertex: f64,
) -> Result<Var, TapeError> {
    let f_own = similarity_gate(tape, gate_own, h_own, sigma_vertex)?;
    let f_nb = similarity_gate(tape, gate_nb, h_nb, sigma_vertex)?;
    let f_lin = similarity_gate(tape, gate_linear, h_lin, sigma_vertex)?;
    let f_up = similarity_gate(tape, gate_upwind, h_up, sigma_vertex)?;
    // Same association as the classical blended face value.
    tape.scalar_mul(
        tape.add(tape.add(f_own, f_nb)?, tape.add(f_lin, f_up)?)?,
        0.25,
    )
}

/// One flux evaluation: net inflow per cell divided by cell volume
/// (`n_cells × encoded_dim`). Fluxes are computed once per face and
/// scattered antisymmetrically, so every column of the result has zero
/// volume-weighted total.
pub fn flux_rhs(
    tape: &Tape,
    vars: &ModelVars,
    prog: &FaceProgram,
    h: Var,
) -> Result<Var, ModelError> {
    let sigma_vertex = prog.sigma(SIG_VERTEX);
    let sigma_conv = prog.sigma(SIG_CONV_FLUX);
    let sigma_grad = prog.sigma(SIG_GRADIENT);
    let mut div: Option<Var> = None;
    let mut accumulate = |tape: &Tape, phi_signed: Var| -> Result<(), TapeError> {
        div = Some(match div {
            Some(acc) => tape.add(acc, phi_signed)?,
            None => phi_signed,
        });
        Ok(())
    };

    // Interior faces.
    let inner = &prog.interior;
    if !inner.face_ids.is_empty() {
        let ids = &inner.face_ids;
        let wrap = |e: TapeError| face_err(e, ids);
        let hi = tape.gather_rows(h, &inner.owners).map_err(wrap)?;
        let hj = tape.gather_rows(h, &inner.neighbors).map_err(wrap)?;
        let hup = tape.gather_rows(h, &inner.donors).map_err(wrap)?;
        let w_own = col(tape, &inner.w_own).map_err(wrap)?;
        let w_nb = col(tape, &inner.w_nb).map_err(wrap)?;
        let hlin = tape
            .add(
                tape.mul(w_own, hi).map_err(wrap)?,
                tape.mul(w_nb, hj).map_err(wrap)?,
            )
            .map_err(wrap)?;
        let blend = face_blend(
            tape,
            vars.gate_vertex,
            vars.gate_vertex,
            vars.gate_linear,
            vars.gate_upwind,
            hi,
            hj,
            hlin,
            hup,
            sigma_vertex,
        )
        .map_err(wrap)?;
        let cxv = col(tape, &inner.cx).map_err(wrap)?;
        let c_enc = tape.mul(cxv, vars.enc_c).map_err(wrap)?;
        let conv_x = similarity_gate(
            tape,
            vars.gate_conv,
            tape.mul(c_enc, blend).map_err(wrap)?,
            sigma_conv,
        )
        .map_err(wrap)?;
        let nx = col(tape, &inner.nx).map_err(wrap)?;
        let conv_n = tape.mul(nx, conv_x).map_err(wrap)?;
        let dist = col(tape, &inner.dist).map_err(wrap)?;
        let grad_n = tape
            .div(tape.sub(hj, hi).map_err(wrap)?, dist)
            .map_err(wrap)?;
        let fgrad = similarity_gate(tape, vars.gate_grad, grad_n, sigma_grad).map_err(wrap)?;
        let dxv = tape.constant_scalar(prog.diffusivity).map_err(wrap)?;
        let d_enc = tape.mul(dxv, vars.enc_d).map_err(wrap)?;
        let area = col(tape, &inner.area).map_err(wrap)?;
        let phi = tape
            .mul(
                area,
                tape.sub(conv_n, tape.mul(d_enc, fgrad).map_err(wrap)?)
                    .map_err(wrap)?,
            )
            .map_err(wrap)?;
        let neg_phi = tape.scalar_mul(phi, -1.0).map_err(wrap)?;
        let out_own = tape
            .scatter_add_rows(neg_phi, &inner.owners, prog.n_cells)
            .map_err(wrap)?;
        let into_nb = tape
            .scatter_add_rows(phi, &inner.neighbors, prog.n_cells)
            .map_err(wrap)?;
        accumulate(tape, tape.add(out_own, into_nb).map_err(wrap)?).map_err(wrap)?;
    }

    // Boundary faces: the constraint substitutes for the reconstruction,
    // and the flux leaves through the owner only.
    for (batch, kind) in [
        (&prog.dirichlet, BoundaryKind::Dirichlet),
        (&prog.neumann, BoundaryKind::Neumann),
    ] {
        if batch.is_empty() {
            continue;
        }
        let ids = &batch.face_ids;
        let wrap = |e: TapeError| face_err(e, ids);
        let ho = tape.gather_rows(h, &batch.owners).map_err(wrap)?;
        let bval = col(tape, &batch.constraint).map_err(wrap)?;
        let b_enc = tape.mul(bval, vars.enc_u_full).map_err(wrap)?;
        let dist = col(tape, &batch.dist).map_err(wrap)?;
        let (face_feature, grad_feature) = match kind {
            BoundaryKind::Dirichlet => {
                let grad = tape
                    .div(tape.sub(b_enc, ho).map_err(wrap)?, dist)
                    .map_err(wrap)?;
                (b_enc, grad)
            }
            BoundaryKind::Neumann => {
                let face = tape
                    .add(ho, tape.mul(dist, b_enc).map_err(wrap)?)
                    .map_err(wrap)?;
                (face, b_enc)
            }
        };
        let cxv = col(tape, &batch.cx).map_err(wrap)?;
        let c_enc = tape.mul(cxv, vars.enc_c).map_err(wrap)?;
        let conv_x = similarity_gate(
            tape,
            vars.gate_conv,
            tape.mul(c_enc, face_feature).map_err(wrap)?,
            sigma_conv,
        )
        .map_err(wrap)?;
        let nx = col(tape, &batch.nx).map_err(wrap)?;
        let conv_n = tape.mul(nx, conv_x).map_err(wrap)?;
        let fgrad =
            similarity_gate(tape, vars.gate_grad, grad_feature, sigma_grad).map_err(wrap)?;
        let dxv = tape.constant_scalar(prog.diffusivity).map_err(wrap)?;
        let d_enc = tape.mul(dxv, vars.enc_d).map_err(wrap)?;
        let area = col(tape, &batch.area).map_err(wrap)?;
        let phi = tape
            .mul(
                area,
                tape.sub(conv_n, tape.mul(d_enc, fgrad).map_err(wrap)?)
                    .map_err(wrap)?,
            )
            .map_err(wrap)?;
        let neg_phi = tape.scalar_mul(phi, -1.0).map_err(wrap)?;
        let out_own = tape
            .scatter_add_rows(neg_phi, &batch.owners, prog.n_cells)
            .map_err(wrap)?;
        accumulate(tape, out_own).map_err(wrap)?;
    }

    let div = div.ok_or_else(|| ModelError::Config("mesh has no faces".into()))?;
    let vol = col(tape, &prog.volumes)?;
    Ok(tape.div(div, vol)?)
}

/// Advances an encoded block one step with the configured integrator.
pub fn advance(
    tape: &Tape,
    vars: &ModelVars,
    prog: &FaceProgram,
    h: Var,
) -> Result<Var, ModelError> {
    match vars.config.solver {
        SolverKind::Explicit => {
            let rhs = flux_rhs(tape, vars, prog, h)?;
            Ok(tape.add(h, tape.scalar_mul(rhs, prog.dt)?)?)
        }
        SolverKind::Bb { iterations } => bb_solve(tape, h, prog.dt, iterations, |tape, state| {
            flux_rhs(tape, vars, prog, state)
        }),
    }
}

/// Fixed-point iteration on the implicit-Euler residual
/// `R(H) = H − h₀ − Δt·rhs(H)`, taking secant (Barzilai–Borwein) step
/// lengths `α = ⟨Δs,Δs⟩ / ⟨Δs,Δy⟩` computed from detached values (the step
/// length itself carries no gradient), clamped to a safe range, with unit
/// fallback when the curvature estimate degenerates.
pub fn bb_solve<E, F>(tape: &Tape, h0: Var, dt: f64, iterations: usize, rhs_fn: F) -> Result<Var, E>
where
    E: From<TapeError>,
    F: Fn(&Tape, Var) -> Result<Var, E>,
{
    let residual = |tape: &Tape, state: Var| -> Result<Var, E> {
        let rhs = rhs_fn(tape, state)?;
        tape.sub(
            tape.sub(state, h0).map_err(E::from)?,
            tape.scalar_mul(rhs, dt).map_err(E::from)?,
        )
        .map_err(E::from)
    };
    let mut state = h0;
    let mut prev: Option<(Array2<f64>, Array2<f64>)> = None; // values of (state, residual)
    for _ in 0..iterations {
        let r = residual(tape, state)?;
        let state_val = tape.value(state);
        let r_val = tape.value(r);
        let alpha = match &prev {
            None => 1.0,
            Some((s_prev, r_prev)) => {
                let ds = &state_val - s_prev;
                let dy = &r_val - r_prev;
                let num: f64 = ds.iter().map(|v| v * v).sum();
                let den: f64 = ds.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
                if den.abs() < tolerances::STEP_LENGTH_DENOM_GUARD {
                    1.0
                } else {
                    let (lo, hi) = tolerances::STEP_LENGTH_CLAMP;
                    (num / den).clamp(lo, hi)
                }
            }
        };
        prev = Some((state_val, r_val));
        state = tape
            .sub(state, tape.scalar_mul(r, alpha).map_err(E::from)?)
            .map_err(E::from)?;
    }
    Ok(state)
}

/// One autoregressive forward: encode the window, advance every segment,
/// decode, and blend the newest decoded state with its predecessor through
/// the smoothing weight. Returns the next column state.
pub fn forward_next(
    tape: &Tape,
    vars: &ModelVars,
    prog: &FaceProgram,
    window: &[Var],
) -> Result<Var, ModelError> {
    let h = encode_window(tape, vars, window)?;
    let h_next = advance(tape, vars, prog, h)?;
    let k = vars.config.bundle;
    let newest = decode_segment(tape, vars, h_next, k - 1)?;
    let previous = if k >= 2 {
        decode_segment(tape, vars, h_next, k - 2)?
    } else {
        window[0]
    };
    let one = tape.constant_scalar(1.0)?;
    let keep = tape.sub(one, vars.bundle_w)?;
    Ok(tape.add(tape.mul(previous, keep)?, tape.mul(newest, vars.bundle_w)?)?)
}

impl FluxModel {
    /// Autoregressive rollout without gradients: each step runs on a fresh
    /// tape, re-encoding the decoded window. Returns all states including
    /// the initial one.
    #[allow(clippy::too_many_arguments)] // mirrors the classical solver's call shape
    pub fn rollout(
        &self,
        mesh: &Mesh,
        params: &TransportParams,
        boundary_values: &[f64],
        u0: &[f64],
        dt: f64,
        steps: usize,
        u_ref: f64,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if u0.len() != mesh.n_cells {
            return Err(ModelError::Fvm(FvmError::FieldLength {
                expected: mesh.n_cells,
                got: u0.len(),
            }));
        }
        let prog = FaceProgram::build(mesh, params, boundary_values, dt, u_ref)?;
        let mut states: Vec<Vec<f64>> = vec![u0.to_vec()];
        let mut window: Vec<Vec<f64>> = vec![u0.to_vec(); self.config.bundle];
        for _ in 0..steps {
            let tape = Tape::new();
            let vars = self.bind(&tape, false)?;
            let window_vars: Vec<Var> = window
                .iter()
                .map(|state| col(&tape, state))
                .collect::<Result<_, _>>()?;
            let next = forward_next(&tape, &vars, &prog, &window_vars)?;
            let next_state: Vec<f64> = tape.value(next).column(0).to_vec();
            states.push(next_state.clone());
            window.remove(0);
            window.push(next_state);
        }
        Ok(states)
    }
}

/// Gradient-checks one full forward step — encode, face fluxes, time
/// advance, decode — against central finite differences, probing every
/// trainable parameter of a freshly initialized small model.
///
/// `step` should be coarser than the usual per-op step: the composed loss
/// is O(1) while saturated gate biases carry gradients near 1e-6, so a very
/// small step lets rounding noise in the difference quotient swamp the
/// signal (the noise floor scales as machine-epsilon times loss over step).
pub fn composed_flux_gradcheck(
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mesh = Mesh::interval(4, 1.0, crate::mesh::MeshBoundary::Periodic)?;
    let params = TransportParams::one_d(0.15, 1e-3);
    let model = FluxModel::new(
        ModelConfig {
            encoded_dim: 8,
            ..ModelConfig::default()
        },
        seed ^ 0x600d,
    )?;
    let prog = FaceProgram::build(&mesh, &params, &[], 0.1, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0: Vec<f64> = (0..mesh.n_cells)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let probe_params: Vec<Array2<f64>> = model.param_refs().iter().map(|p| (*p).clone()).collect();
    let config = model.config;
    let decoder_row0 = model
        .decoder
        .row(0)
        .to_owned()
        .into_shape_with_order((1, model.config.encoded_dim))
        .expect("row reshape");
    let prog_ref = &prog;
    let u0_ref = &u0;
    let f = move |tape: &Tape, vs: &[Var]| -> Result<Var, TapeError> {
        // Assemble bound vars directly from the probe tensors so both the
        // tracked pass and the finite-difference passes see the same
        // parameter values.
        let mut vs_iter = vs.iter().copied();
        let enc_u = vs_iter.next().expect("encoder var");
        let enc_c = vs_iter.next().expect("velocity encoder var");
        let enc_d = vs_iter.next().expect("diffusivity encoder var");
        let mut gate = || -> GateVars {
            GateVars::Learned(crate::equivariant::MlpVars {
                w1: vs_iter.next().expect("gate w1"),
                b1: vs_iter.next().expect("gate b1"),
                w2: vs_iter.next().expect("gate w2"),
                b2: vs_iter.next().expect("gate b2"),
            })
        };
        let gate_vertex = gate();
        let gate_linear = gate();
        let gate_upwind = gate();
        let gate_conv = gate();
        let gate_grad = gate();
        let bundle_w = vs_iter.next().expect("smoothing var");
        let decoder_row = tape.constant(decoder_row0.clone())?;
        let vars = ModelVars {
            config,
            enc_u_segments: vec![enc_u],
            enc_u_full: enc_u,
            enc_c,
            enc_d,
            gate_vertex,
            gate_linear,
            gate_upwind,
            gate_conv,
            gate_grad,
            bundle_w,
            decoder_rows: vec![decoder_row],
        };
        let u0v = col(tape, u0_ref)?;
        let next =
            forward_next(tape, &vars, prog_ref, &[u0v]).map_err(|_| TapeError::TapeConsumed)?;
        tape.sum_all(tape.mul(next, next)?)
    };
    Ok(crate::autodiff::grad_check(
        f,
        &probe_params,
        n_probes,
        step,
        seed ^ 0x5eed,
    )?)
}
