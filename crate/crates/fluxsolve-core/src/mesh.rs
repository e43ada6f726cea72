//! Cell-centered interval meshes and their face-adjacency graphs.
//!
//! A mesh is a set of cells with centroids and volumes plus a set of faces,
//! each face knowing its owner cell, the cell (or boundary slot) on the far
//! side, its area, unit normal (pointing out of the owner) and centroid.
//! Periodic meshes wrap the last face back to cell 0 and carry no boundary
//! faces; bounded meshes carry one boundary face per end, tagged with the
//! kind of constraint applied there.
//!
//! Boundary faces reference a *virtual* slot instead of a cell. Virtual
//! slots never index cell arrays; on the wire they are encoded as negative
//! integers (`slot k ↦ -(k+1)`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::f17;

/// Errors from mesh construction or (de)serialization.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh needs at least one cell")]
    EmptyMesh,
    #[error("mesh length must be positive, got {0}")]
    NonPositiveLength(f64),
    #[error("face {0} out of range for {1} faces")]
    FaceOutOfRange(usize, usize),
    #[error("mesh failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("mesh serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Kind of constraint applied at a domain boundary face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// The face value of the transported quantity is prescribed.
    Dirichlet,
    /// The face-normal gradient of the transported quantity is prescribed.
    Neumann,
}

/// Domain topology: periodic wrap or a bounded interval with a constraint
/// kind at each end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshBoundary {
    Periodic,
    Bounded {
        left: BoundaryKind,
        right: BoundaryKind,
    },
}

/// Reference from a face to whatever lies on its far side: either an
/// interior cell or a virtual boundary slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellRef {
    Cell(usize),
    /// Index into the mesh's boundary-value table, not into cell arrays.
    Virtual(usize),
}

impl CellRef {
    /// Interior cell index, if this is one.
    pub fn cell(self) -> Option<usize> {
        match self {
            CellRef::Cell(i) => Some(i),
            CellRef::Virtual(_) => None,
        }
    }

    fn to_wire(self) -> i64 {
        match self {
            CellRef::Cell(i) => i as i64,
            CellRef::Virtual(k) => -(k as i64) - 1,
        }
    }

    fn from_wire(v: i64) -> Self {
        if v >= 0 {
            CellRef::Cell(v as usize)
        } else {
            CellRef::Virtual((-v - 1) as usize)
        }
    }
}

impl Serialize for CellRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CellRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(CellRef::from_wire(i64::deserialize(d)?))
    }
}

/// A face between two cells, or between a cell and the domain boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Face {
    /// Cell on the near side; the normal points out of it.
    pub owner: usize,
    /// Cell or virtual boundary slot on the far side.
    pub neighbor: CellRef,
    pub area: f64,
    /// Unit normal, oriented owner → neighbor.
    #[serde(with = "f17::vec")]
    pub normal: Vec<f64>,
    #[serde(with = "f17::vec")]
    pub centroid: Vec<f64>,
}

impl Face {
    /// True when the far side is a virtual boundary slot.
    pub fn is_boundary(&self) -> bool {
        matches!(self.neighbor, CellRef::Virtual(_))
    }
}

/// Geometry of one face as seen from a chosen side.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub area: f64,
    /// Unit normal pointing away from the viewing side.
    pub normal: Vec<f64>,
    /// Displacement from the viewing cell's centroid to the far-side
    /// centroid (interior faces; wrap-corrected on periodic meshes), or to
    /// the face centroid (boundary faces).
    pub d_vec: Vec<f64>,
    pub centroid: Vec<f64>,
}

impl FaceGeometry {
    /// The same face viewed from the far side: normal and displacement flip.
    pub fn flipped(&self) -> FaceGeometry {
        FaceGeometry {
            area: self.area,
            normal: self.normal.iter().map(|v| -v).collect(),
            d_vec: self.d_vec.iter().map(|v| -v).collect(),
            centroid: self.centroid.clone(),
        }
    }
}

/// A cell-centered interval mesh.
///
/// Fields are public so tests and tools can build or perturb meshes
/// directly; [`Mesh::validate`] reports any structural damage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeshWire", into = "MeshWire")]
pub struct Mesh {
    pub n_cells: usize,
    pub length: f64,
    pub boundary: MeshBoundary,
    /// Cell centroid coordinates (one coordinate per dimension).
    pub cell_centroids: Vec<Vec<f64>>,
    /// Cell volumes, derived from face positions.
    pub cell_volumes: Vec<f64>,
    pub faces: Vec<Face>,
}

/// Wire layout of [`Mesh`]: volumes are derived data and stay off the wire.
#[derive(Serialize, Deserialize)]
struct MeshWire {
    n_cells: usize,
    #[serde(with = "f17::scalar")]
    length: f64,
    boundary: MeshBoundary,
    #[serde(with = "f17::vec2")]
    cell_centroids: Vec<Vec<f64>>,
    faces: Vec<Face>,
}

impl From<Mesh> for MeshWire {
    fn from(m: Mesh) -> Self {
        MeshWire {
            n_cells: m.n_cells,
            length: m.length,
            boundary: m.boundary,
            cell_centroids: m.cell_centroids,
            faces: m.faces,
        }
    }
}

impl TryFrom<MeshWire> for Mesh {
    type Error = String;

    fn try_from(w: MeshWire) -> Result<Self, String> {
        let volumes = derive_volumes(w.n_cells, w.length, w.boundary, &w.cell_centroids, &w.faces)
            .map_err(|e| e.to_string())?;
        let mesh = Mesh {
            n_cells: w.n_cells,
            length: w.length,
            boundary: w.boundary,
            cell_centroids: w.cell_centroids,
            cell_volumes: volumes,
            faces: w.faces,
        };
        let report = mesh.validate();
        if report.is_ok() {
            Ok(mesh)
        } else {
            Err(MeshError::Invalid(report).to_string())
        }
    }
}

/// Shortest signed displacement from `a` to `b` on a periodic interval,
/// mapped into `(-length/2, length/2]` (exact half-period gaps keep the
/// positive sign).
pub(crate) fn periodic_delta(a: f64, b: f64, length: f64) -> f64 {
    let d = b - a;
    d - length * (d / length - 0.5).ceil()
}

fn derive_volumes(
    n_cells: usize,
    length: f64,
    boundary: MeshBoundary,
    centroids: &[Vec<f64>],
    faces: &[Face],
) -> Result<Vec<f64>, MeshError> {
    if n_cells == 0 {
        return Err(MeshError::EmptyMesh);
    }
    if !(length > 0.0) {
        return Err(MeshError::NonPositiveLength(length));
    }
    // Each 1-D cell is bounded by exactly two faces; its volume is the gap
    // between them (wrap-corrected when periodic). A single periodic cell
    // owns the whole interval.
    let mut incident: Vec<Vec<f64>> = vec![Vec::new(); n_cells];
    for f in faces {
        let pos = *f.centroid.first().unwrap_or(&0.0);
        if f.owner < n_cells {
            incident[f.owner].push(pos);
        }
        if let Some(j) = f.neighbor.cell() {
            if j < n_cells && j != f.owner {
                incident[j].push(pos);
            }
        }
    }
    let periodic = matches!(boundary, MeshBoundary::Periodic);
    let mut volumes = Vec::with_capacity(n_cells);
    for (i, inc) in incident.iter().enumerate() {
        let v = match inc.as_slice() {
            [a, b] => {
                if periodic {
                    periodic_delta(*a, *b, length).abs()
                } else {
                    (b - a).abs()
                }
            }
            [_] if periodic && n_cells == 1 => length,
            _ => 0.0, // flagged by validation
        };
        let _ = (i, centroids); // centroids unused for 1-D volumes
        volumes.push(v);
    }
    Ok(volumes)
}

impl Mesh {
    /// Builds a uniform 1-D interval mesh of `n_cells` cells over
    /// `[0, length]`.
    ///
    /// Periodic meshes get `n_cells` interior faces (the last one wraps back
    /// to cell 0, reported at coordinate 0); bounded meshes get
    /// `n_cells − 1` interior faces plus one boundary face per end (virtual
    /// slot 0 = left, slot 1 = right).
    pub fn interval(
        n_cells: usize,
        length: f64,
        boundary: MeshBoundary,
    ) -> Result<Mesh, MeshError> {
        if n_cells == 0 {
            return Err(MeshError::EmptyMesh);
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(MeshError::NonPositiveLength(length));
        }
        let dx = length / n_cells as f64;
        let cell_centroids: Vec<Vec<f64>> =
            (0..n_cells).map(|i| vec![(i as f64 + 0.5) * dx]).collect();
        let mut faces = Vec::new();
        match boundary {
            MeshBoundary::Periodic => {
                for f in 0..n_cells {
                    let wraps = f + 1 == n_cells;
                    faces.push(Face {
                        owner: f,
                        neighbor: CellRef::Cell(if wraps { 0 } else { f + 1 }),
                        area: 1.0,
                        normal: vec![1.0],
                        centroid: vec![if wraps { 0.0 } else { (f as f64 + 1.0) * dx }],
                    });
                }
            }
            MeshBoundary::Bounded { .. } => {
                for f in 0..n_cells.saturating_sub(1) {
                    faces.push(Face {
                        owner: f,
                        neighbor: CellRef::Cell(f + 1),
                        area: 1.0,
                        normal: vec![1.0],
                        centroid: vec![(f as f64 + 1.0) * dx],
                    });
                }
                faces.push(Face {
                    owner: 0,
                    neighbor: CellRef::Virtual(0),
                    area: 1.0,
                    normal: vec![-1.0],
                    centroid: vec![0.0],
                });
                faces.push(Face {
                    owner: n_cells - 1,
                    neighbor: CellRef::Virtual(1),
                    area: 1.0,
                    normal: vec![1.0],
                    centroid: vec![length],
                });
            }
        }
        // Volumes come from the same face-gap derivation used when loading
        // from JSON, so an in-memory mesh and its serialized twin agree to
        // the bit.
        let cell_volumes = derive_volumes(n_cells, length, boundary, &cell_centroids, &faces)?;
        Ok(Mesh {
            n_cells,
            length,
            boundary,
            cell_centroids,
            cell_volumes,
            faces,
        })
    }

    /// Uniform cell spacing (1-D).
    pub fn dx(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.boundary, MeshBoundary::Periodic)
    }

    /// Constraint kind attached to a virtual boundary slot, if the slot
    /// exists (slot 0 = left end, slot 1 = right end).
    pub fn boundary_kind(&self, slot: usize) -> Option<BoundaryKind> {
        match self.boundary {
            MeshBoundary::Periodic => None,
            MeshBoundary::Bounded { left, right } => match slot {
                0 => Some(left),
                1 => Some(right),
                _ => None,
            },
        }
    }

    /// Geometry of `face_id` as seen from its owner.
    pub fn face_geometry(&self, face_id: usize) -> Result<FaceGeometry, MeshError> {
        let face = self
            .faces
            .get(face_id)
            .ok_or(MeshError::FaceOutOfRange(face_id, self.faces.len()))?;
        let xi = &self.cell_centroids[face.owner];
        let d_vec: Vec<f64> = match face.neighbor {
            CellRef::Cell(j) if j == face.owner && self.is_periodic() => {
                // Self-loop wrap face of a single-cell mesh: the far side is
                // the same cell one full period away along the normal.
                face.normal.iter().map(|n| n * self.length).collect()
            }
            CellRef::Cell(j) => {
                let xj = &self.cell_centroids[j];
                xi.iter()
                    .zip(xj)
                    .map(|(a, b)| {
                        if self.is_periodic() {
                            periodic_delta(*a, *b, self.length)
                        } else {
                            b - a
                        }
                    })
                    .collect()
            }
            CellRef::Virtual(_) => xi
                .iter()
                .zip(&face.centroid)
                .map(|(a, b)| {
                    if self.is_periodic() {
                        periodic_delta(*a, *b, self.length)
                    } else {
                        b - a
                    }
                })
                .collect(),
        };
        Ok(FaceGeometry {
            area: face.area,
            normal: face.normal.clone(),
            d_vec,
            centroid: face.centroid.clone(),
        })
    }

    /// Distance from the owner centroid to the face centroid (used by the
    /// boundary-constraint formulas).
    pub fn owner_to_face_distance(&self, face_id: usize) -> Result<f64, MeshError> {
        let face = self
            .faces
            .get(face_id)
            .ok_or(MeshError::FaceOutOfRange(face_id, self.faces.len()))?;
        let xi = &self.cell_centroids[face.owner];
        let d2: f64 = xi
            .iter()
            .zip(&face.centroid)
            .map(|(a, b)| {
                let d = if self.is_periodic() {
                    periodic_delta(*a, *b, self.length)
                } else {
                    b - a
                };
                d * d
            })
            .sum();
        Ok(d2.sqrt())
    }

    /// Checks structural invariants, returning every violation found.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.n_cells == 0 {
            violations.push(Violation::Empty);
        }
        if !(self.length > 0.0) {
            violations.push(Violation::NonPositiveLength {
                length: self.length,
            });
        }
        if self.cell_centroids.len() != self.n_cells {
            violations.push(Violation::CentroidCountMismatch {
                got: self.cell_centroids.len(),
                expected: self.n_cells,
            });
        }
        for (i, v) in self.cell_volumes.iter().enumerate() {
            if !(*v > 0.0) || !v.is_finite() {
                violations.push(Violation::NonPositiveVolume {
                    cell: i,
                    volume: *v,
                });
            }
        }
        let bounded = !self.is_periodic();
        for (k, face) in self.faces.iter().enumerate() {
            if face.owner >= self.n_cells {
                violations.push(Violation::OwnerOutOfRange {
                    face: k,
                    owner: face.owner,
                });
            }
            match face.neighbor {
                CellRef::Cell(j) if j >= self.n_cells => {
                    violations.push(Violation::NeighborOutOfRange {
                        face: k,
                        neighbor: j,
                    });
                }
                CellRef::Cell(j) if j == face.owner && self.n_cells > 1 => {
                    violations.push(Violation::SelfLoop { face: k });
                }
                CellRef::Virtual(_) if !bounded => {
                    violations.push(Violation::BoundaryFaceOnPeriodicMesh { face: k });
                }
                _ => {}
            }
            if !(face.area > 0.0) || !face.area.is_finite() {
                violations.push(Violation::NonPositiveArea {
                    face: k,
                    area: face.area,
                });
            }
            let norm: f64 = face.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                violations.push(Violation::NonUnitNormal { face: k, norm });
            }
        }
        ValidationReport { violations }
    }

    /// Canonical JSON text of this mesh.
    pub fn to_json(&self) -> Result<String, MeshError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Mesh, MeshError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Content hash of the canonical JSON text, used as a stable reference
    /// to this mesh from trajectories and manifests.
    pub fn content_hash(&self) -> String {
        let json = self.to_json().expect("valid mesh serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// One directed half-edge of the cell-adjacency graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HalfEdge {
    pub from: usize,
    pub to: CellRef,
    /// Face this half-edge crosses.
    pub face: usize,
    /// True for the single half-edge of a boundary face.
    pub boundary: bool,
}

/// Directed-graph view of a mesh: two opposite half-edges per interior face,
/// one flagged half-edge per boundary face.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    pub n_cells: usize,
    pub half_edges: Vec<HalfEdge>,
}

impl GraphTopology {
    /// Builds the half-edge view of `mesh`.
    pub fn from_mesh(mesh: &Mesh) -> GraphTopology {
        let mut half_edges = Vec::with_capacity(2 * mesh.faces.len());
        for (k, face) in mesh.faces.iter().enumerate() {
            match face.neighbor {
                CellRef::Cell(j) => {
                    half_edges.push(HalfEdge {
                        from: face.owner,
                        to: CellRef::Cell(j),
                        face: k,
                        boundary: false,
                    });
                    half_edges.push(HalfEdge {
                        from: j,
                        to: CellRef::Cell(face.owner),
                        face: k,
                        boundary: false,
                    });
                }
                CellRef::Virtual(_) => {
                    half_edges.push(HalfEdge {
                        from: face.owner,
                        to: face.neighbor,
                        face: k,
                        boundary: true,
                    });
                }
            }
        }
        GraphTopology {
            n_cells: mesh.n_cells,
            half_edges,
        }
    }
}

/// A structural defect found by [`Mesh::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    NonPositiveLength { length: f64 },
    CentroidCountMismatch { got: usize, expected: usize },
    NonPositiveVolume { cell: usize, volume: f64 },
    OwnerOutOfRange { face: usize, owner: usize },
    NeighborOutOfRange { face: usize, neighbor: usize },
    SelfLoop { face: usize },
    BoundaryFaceOnPeriodicMesh { face: usize },
    NonPositiveArea { face: usize, area: f64 },
    NonUnitNormal { face: usize, norm: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Empty => write!(f, "mesh has no cells"),
            Violation::NonPositiveLength { length } => {
                write!(f, "non-positive length {length}")
            }
            Violation::CentroidCountMismatch { got, expected } => {
                write!(f, "{got} centroids for {expected} cells")
            }
            Violation::NonPositiveVolume { cell, volume } => {
                write!(f, "cell {cell} has non-positive volume {volume}")
            }
            Violation::OwnerOutOfRange { face, owner } => {
                write!(f, "face {face} owner {owner} out of range")
            }
            Violation::NeighborOutOfRange { face, neighbor } => {
                write!(f, "face {face} neighbor {neighbor} out of range")
            }
            Violation::SelfLoop { face } => {
                write!(f, "face {face} is a self-loop on a multi-cell mesh")
            }
            Violation::BoundaryFaceOnPeriodicMesh { face } => {
                write!(f, "face {face} is a boundary face on a periodic mesh")
            }
            Violation::NonPositiveArea { face, area } => {
                write!(f, "face {face} has non-positive area {area}")
            }
            Violation::NonUnitNormal { face, norm } => {
                write!(f, "face {face} normal has norm {norm}, expected 1")
            }
        }
    }
}

/// Everything [`Mesh::validate`] found.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}
