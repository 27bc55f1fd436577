//! Crate-wide error type.
//!
//! One enum covers all modules; variants carry enough context (href, chunk
//! name, field path) to make diagnostics actionable without a backtrace.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- document fetch / catalog ----
    #[error("not found: {href}")]
    NotFound { href: String },
    #[error("fetch failed for {href}: {reason}")]
    Fetch { href: String, reason: String },
    #[error("document {href} exceeds size limit of {limit} bytes")]
    SizeLimit { href: String, limit: u64 },
    #[error("malformed document {href}: {reason}")]
    MalformedDocument { href: String, reason: String },
    #[error("duplicate item id {id:?}")]
    DuplicateItemId { id: String },
    #[error("invalid item {href}: field {field}: {reason}")]
    InvalidItem {
        href: String,
        field: String,
        reason: String,
    },
    #[error("invalid query: {reason}")]
    InvalidQuery { reason: String },

    // ---- grids and rasters ----
    #[error("unsupported CRS pair {from} -> {to}")]
    UnsupportedCrs { from: u32, to: u32 },
    #[error("latitude {lat} out of range (|lat| must be < 90)")]
    LatitudeOutOfRange { lat: f64 },
    #[error("invalid grid: {reason}")]
    InvalidGrid { reason: String },
    #[error("query bbox does not intersect any item footprint")]
    EmptyIntersection,
    #[error("mixed item projections: expected EPSG:{expected}, found EPSG:{found}")]
    MixedEpsg { expected: u32, found: u32 },
    #[error("projection mismatch: source EPSG:{src}, target EPSG:{dst}")]
    EpsgMismatch { src: u32, dst: u32 },
    #[error("pixel index ({row}, {col}) outside grid {height}x{width}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid raster: {reason}")]
    InvalidRaster { reason: String },

    // ---- datacubes and stores ----
    #[error("empty search: no items match the query")]
    EmptySearch,
    #[error("no frames survive planning: {reason}")]
    NoFramesSurvive { reason: String },
    #[error("band {band:?} is missing from every item")]
    BandMissingEverywhere { band: String },
    #[error("frame {item} has no quality asset")]
    MissingQualityAsset { item: String },
    #[error("quality mask for {item} is {found}, expected u8")]
    BadMaskDtype { item: String, found: String },
    #[error("all frames removed by quality thresholds (max_cloud={max_cloud}, min_valid={min_valid}); relax thresholds")]
    AllFramesFiltered { max_cloud: f64, min_valid: f64 },
    #[error("window {what} range {start}..{end} out of bounds (size {size})")]
    WindowOutOfBounds {
        what: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("empty {what} range")]
    EmptyRange { what: &'static str },
    #[error("unknown band {band:?}")]
    UnknownBand { band: String },
    #[error("store format version {found:?} unsupported (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },
    #[error("store at {path} is missing chunk {name}")]
    MissingChunk { path: String, name: String },
    #[error("store metadata missing at {path}")]
    MissingMetadata { path: String },
    #[error("store at {path} already exists with a different schema")]
    SchemaMismatch { path: String },
    #[error("invalid cube schema: {reason}")]
    InvalidSchema { reason: String },

    // ---- task graphs ----
    #[error("task references unknown dependency {id}")]
    UnknownDep { id: String },
    #[error("operation kind {kind:?} is not registered")]
    UnregisteredOp { kind: String },
    #[error("task {id} ({kind}) failed: {reason}")]
    TaskFailed {
        id: String,
        kind: String,
        reason: String,
    },

    // ---- model ----
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("spatial dims must be even, got {height}x{width}")]
    OddDims { height: usize, width: usize },
    #[error("no counted pixels (all ignored or invalid)")]
    NoCountedPixels,
    #[error("cannot sample {k} frames from a series of {n}")]
    SubsetTooLarge { n: usize, k: usize },
    #[error("non-finite gradient in group {group}")]
    NonFiniteGradient { group: String },
    #[error("unknown model artifact header")]
    BadModelHeader,
    #[error("model artifact truncated or malformed: {reason}")]
    BadModelArtifact { reason: String },
    #[error("data and label stores are misaligned: {reason}")]
    MisalignedStores { reason: String },

    // ---- configuration ----
    #[error("config error: {reason}")]
    Config { reason: String },

    // ---- passthrough ----
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by configuration or usage rather than data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidQuery { .. })
    }
}
