//! Closed-form transport trajectories and dataset files.
//!
//! The benchmark problem is scalar convection–diffusion of a cosine wave on
//! the unit-period line, which has the closed form
//! `u(t, x) = a · exp(−(2π)²·D·t) · cos(2π·(x − c·t + x₀))`: the wave
//! travels at speed `c` while its amplitude decays at the diffusion rate.
//! Datasets are collections of such trajectories point-sampled at cell
//! centroids, with the wave parameters drawn per sample from seeded uniform
//! ranges. Generation is a pure function of the master seed, down to the
//! serialized bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::f17;
use crate::mesh::{Mesh, MeshBoundary, MeshError};
use crate::pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of cells of the stock problem grid.
pub const STOCK_N_CELLS: usize = 10;
/// Domain length (one full period of the wave).
pub const STOCK_LENGTH: f64 = 1.0;
/// Step size of stored trajectories.
pub const STOCK_DT: f64 = 0.1;
/// Final time of stored trajectories.
pub const STOCK_T_MAX: f64 = 1.0;
/// Diffusivity shared by all samples.
pub const STOCK_DIFFUSIVITY: f64 = 1e-4;
/// Per-sample velocity range (uniform draw).
pub const VELOCITY_RANGE: (f64, f64) = (0.0, 0.2);
/// Per-sample amplitude range (uniform draw).
pub const AMPLITUDE_RANGE: (f64, f64) = (0.5, 1.0);
/// Per-sample phase-offset range (uniform draw).
pub const PHASE_RANGE: (f64, f64) = (0.0, 1.0);

/// Errors around dataset generation and I/O.
#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("sample {index}: {field} = {value} outside [{lo}, {hi}]")]
    ParamOutOfRange {
        index: usize,
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(
        "sample {index}: expected {expected} states of {cells} cells, got {got_states}x{got_cells}"
    )]
    StateShape {
        index: usize,
        expected: usize,
        cells: usize,
        got_states: usize,
        got_cells: usize,
    },
    #[error("split must contain at least one sample")]
    EmptySplit,
}

/// The travelling decaying cosine wave on the unit-period line.
pub fn exact_solution(t: f64, x: f64, c: f64, d: f64, amplitude: f64, phase: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    amplitude * (-(two_pi * two_pi) * d * t).exp() * (two_pi * (x - c * t + phase)).cos()
}

/// The closed form evaluated at every cell centroid.
pub fn sample_on_mesh(mesh: &Mesh, t: f64, c: f64, d: f64, amplitude: f64, phase: f64) -> Vec<f64> {
    mesh.cell_centroids
        .iter()
        .map(|x| exact_solution(t, x[0], c, d, amplitude, phase))
        .collect()
}

/// One stored trajectory with its generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// RNG seed this sample's parameters were drawn from.
    pub seed: u64,
    /// Wave speed.
    #[serde(rename = "c", with = "f17::scalar")]
    pub velocity: f64,
    /// Diffusivity.
    #[serde(rename = "D", with = "f17::scalar")]
    pub diffusivity: f64,
    /// Wave amplitude.
    #[serde(rename = "u_amp", with = "f17::scalar")]
    pub amplitude: f64,
    /// Phase offset in period fractions.
    #[serde(rename = "x0", with = "f17::scalar")]
    pub phase: f64,
    /// Cell states at `t = 0, Δt, …, T`.
    #[serde(with = "f17::vec2")]
    pub states: Vec<Vec<f64>>,
}

/// One dataset split: samples plus the grid and step they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitData {
    pub samples: Vec<Sample>,
    pub mesh: Mesh,
    #[serde(with = "f17::scalar")]
    pub dt: f64,
    /// Reference field magnitude for dimensionless gate inputs.
    #[serde(with = "f17::scalar", default = "default_u_ref")]
    pub u_ref: f64,
}

fn default_u_ref() -> f64 {
    1.0
}

/// Train/validation/test bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

/// Split sizes and the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 100,
            n_val: 10,
            n_test: 10,
            seed: 0,
        }
    }
}

/// Draws one sample's parameters from its seed (velocity, then amplitude,
/// then phase) and evaluates the closed form on the mesh at every step.
pub fn generate_sample(mesh: &Mesh, dt: f64, t_max: f64, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let velocity = rng.gen_range(VELOCITY_RANGE.0..=VELOCITY_RANGE.1);
    let amplitude = rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
    let phase = rng.gen_range(PHASE_RANGE.0..=PHASE_RANGE.1);
    let steps = (t_max / dt).round() as usize;
    let states = (0..=steps)
        .map(|k| {
            sample_on_mesh(
                mesh,
                k as f64 * dt,
                velocity,
                STOCK_DIFFUSIVITY,
                amplitude,
                phase,
            )
        })
        .collect();
    Sample {
        seed,
        velocity,
        diffusivity: STOCK_DIFFUSIVITY,
        amplitude,
        phase,
        states,
    }
}

/// Generates the three splits on the stock grid. Per-sample seeds are drawn
/// from the master seed up front (train, then validation, then test), so
/// samples can be generated in any order — including in parallel — without
/// changing the result.
pub fn generate_dataset(cfg: DatasetConfig) -> Result<DatasetBundle, DataError> {
    let mesh = Mesh::interval(STOCK_N_CELLS, STOCK_LENGTH, MeshBoundary::Periodic)?;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |n: usize| -> Vec<u64> { (0..n).map(|_| seeder.gen()).collect() };
    let seeds_train = split(cfg.n_train);
    let seeds_val = split(cfg.n_val);
    let seeds_test = split(cfg.n_test);

    let build = |seeds: Vec<u64>| -> SplitData {
        let mesh_ref = &mesh;
        let samples = pool::map_indexed(seeds.len(), |i| {
            generate_sample(mesh_ref, STOCK_DT, STOCK_T_MAX, seeds[i])
        });
        SplitData {
            samples,
            mesh: mesh.clone(),
            dt: STOCK_DT,
            u_ref: default_u_ref(),
        }
    };
    Ok(DatasetBundle {
        train: build(seeds_train),
        val: build(seeds_val),
        test: build(seeds_test),
    })
}

impl SplitData {
    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a split: parameter ranges, state shapes and
    /// mesh structure are all checked.
    pub fn from_json(text: &str) -> Result<SplitData, DataError> {
        let split: SplitData = serde_json::from_str(text)?;
        split.validate()?;
        Ok(split)
    }

    /// Number of evolution steps per trajectory (states minus the initial
    /// one).
    pub fn n_steps(&self) -> usize {
        self.samples
            .first()
            .map_or(0, |s| s.states.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::EmptySplit);
        }
        let expected_states = self.samples[0].states.len();
        for (index, s) in self.samples.iter().enumerate() {
            let check = |field: &'static str, value: f64, (lo, hi): (f64, f64)| {
                if value < lo || value > hi {
                    Err(DataError::ParamOutOfRange {
                        index,
                        field,
                        value,
                        lo,
                        hi,
                    })
                } else {
                    Ok(())
                }
            };
            check("velocity", s.velocity, VELOCITY_RANGE)?;
            check("amplitude", s.amplitude, AMPLITUDE_RANGE)?;
            check("phase", s.phase, PHASE_RANGE)?;
            if s.states.len() != expected_states
                || s.states.iter().any(|row| row.len() != self.mesh.n_cells)
            {
                return Err(DataError::StateShape {
                    index,
                    expected: expected_states,
                    cells: self.mesh.n_cells,
                    got_states: s.states.len(),
                    got_cells: s.states.first().map_or(0, Vec::len),
                });
            }
        }
        Ok(())
    }
}
