use thiserror::Error;

/// Errors raised by lattice construction, environment generation and the
/// numerical routines built on top of them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("lattice dimension must be at least 1, got {0}")]
    InvalidDimension(usize),

    #[error("expected {expected} extents, got {got}")]
    ExtentCount { expected: usize, got: usize },

    #[error("axis {axis}: extent {extent} is below the minimum {min} for a {boundary}")]
    InvalidExtent {
        axis: usize,
        extent: usize,
        min: usize,
        boundary: &'static str,
    },

    #[error("vertex {vertex} out of range (graph has {count} vertices)")]
    VertexOutOfRange { vertex: usize, count: usize },

    #[error("edge {edge} out of range (graph has {count} edges)")]
    EdgeOutOfRange { edge: usize, count: usize },

    #[error("coordinate {coord:?} lies outside the lattice")]
    CoordinateOutOfRange { coord: Vec<i64> },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("ratio undefined: the test function vanishes identically")]
    ZeroFunction,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value at index {index} must be strictly positive and finite, got {value}")]
    NonPositive { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("walk left the graph at step {step}; extent of at least {required} needed on axis {axis}")]
    PathExitsGraph {
        step: usize,
        axis: usize,
        required: usize,
    },

    #[error("box of half-width {half_width} around the centre does not fit in the lattice")]
    BoxTooSmall { half_width: usize },

    #[error("time grid must be nonnegative and ascending")]
    InvalidTimeGrid,

    #[error("time grid [{grid_start}, {grid_end}] does not cover interval [{start}, {end}]")]
    GridDoesNotCover {
        start: f64,
        end: f64,
        grid_start: f64,
        grid_end: f64,
    },

    #[error("tolerance {tol} unreachable: truncation order would exceed {budget}")]
    ToleranceUnreachable { tol: f64, budget: usize },

    #[error("(t = {t}, d = {distance}) lies in the gap regime between c1*t and c5*t")]
    GapRegime { t: f64, distance: f64 },

    #[error("regime {requested} requested but (t = {t}, d = {distance}) belongs to {actual}")]
    RegimeMismatch {
        requested: &'static str,
        actual: &'static str,
        t: f64,
        distance: f64,
    },

    #[error("environment import failed: {0}")]
    Import(String),
}

pub type Result<T> = std::result::Result<T, Error>;
