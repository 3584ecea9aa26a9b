use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not convex and counter-clockwise (turn at vertex {0})")]
    NonConvexPolygon(usize),
    #[error("polygon has non-positive area {0}")]
    DegeneratePolygon(f64),
    #[error("slab parameter delta = {0} must satisfy 0 < delta <= 1")]
    InvalidSlab(f64),
    #[error("cap height H = {cap} does not exceed the admissibility threshold {threshold}")]
    CapTooLow { cap: f64, threshold: f64 },
    #[error(
        "horizontal radius D = {radius} is smaller than max |x| over the domain ({max_abs_x})"
    )]
    RadiusTooSmall { radius: f64, max_abs_x: f64 },

    #[error("masses sum to {0}, expected 1")]
    MassNormalization(f64),
    #[error("mass of atom {index} is {mass}, must be positive")]
    NonPositiveMass { index: usize, mass: f64 },
    #[error("atom {index} has y3 = {y3}, outside the slab [{lo}, {hi}]")]
    SlabViolation {
        index: usize,
        y3: f64,
        lo: f64,
        hi: f64,
    },
    #[error("atom {index} has horizontal radius {radius} > D = {limit}")]
    RadiusViolation {
        index: usize,
        radius: f64,
        limit: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("empty cloud")]
    EmptyCloud,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("free surface reached the cap H = {cap} at column ({x1}, {x2}); choose a larger H")]
    CapSaturated { x1: f64, x2: f64, cap: f64 },
    #[error("cell {0} is empty; its centroid is undefined")]
    EmptyCell(usize),
    #[error("marginals infeasible: max |vol_i - nu_i| = {residual} exceeds {tol}")]
    InfeasibleMarginals { residual: f64, tol: f64 },
    #[error("solver tolerance {tol} is below the floating point floor {floor}")]
    ToleranceBelowFloor { tol: f64, floor: f64 },
    #[error("dual solve did not converge: {0}")]
    NotConverged(String),
    #[error("support radius {radius} exceeds the allowed growth bound {allowed} at step {step}")]
    SupportGrowth {
        radius: f64,
        allowed: f64,
        step: usize,
    },

    #[error("particle {0} lies on or above the initial free surface")]
    ParticleAboveSurface(usize),
    #[error("test function psi does not vanish at the final time (psi(T, .) = {0})")]
    PsiNotTerminal(f64),
    #[error("trajectory needs at least {needed} snapshots, got {found}")]
    TooFewSnapshots { needed: usize, found: usize },
    #[error("snapshot times are not uniformly spaced")]
    NonUniformStride,

    #[error("voxel resolution {0} outside the supported range [16, 512]")]
    VoxelResolution(usize),
    #[error("voxel grid of {0} cells exceeds the memory guard of 512^3")]
    VoxelMemoryGuard(u64),
    #[error("exact W1 enumeration supports at most 8 atoms, got {0}")]
    TooManyAtoms(usize),
    #[error("measures do not share identical masses")]
    MassMismatch,
    #[error("rejection sampling failed after {0} draws")]
    RejectionFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            msg: err.to_string(),
        }
    }
}
