use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum SpecfunError {
    #[error("gamma function pole at x = {0}")]
    Pole(f64),
    #[error("argument outside the function domain: {0}")]
    Domain(f64),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Specfun(#[from] SpecfunError),

    #[error("invalid mode index: {0}")]
    InvalidIndex(String),

    #[error("field grids differ: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Quadratic-phase sampling criterion of the transfer function failed.
    #[error(
        "Fresnel sampling criterion violated for dz = {dz:.4e} m: \
         lambda*|dz| = {lhs:.3e} m^2 exceeds extent*dx = {rhs:.3e} m^2; \
         need n >= {min_n} at the current pixel pitch"
    )]
    Sampling { dz: f64, lhs: f64, rhs: f64, min_n: usize },

    #[error("propagation distance must be non-zero")]
    ZeroDistance,

    #[error("direct Fresnel quadrature refuses n = {0} (limit 256)")]
    GridTooLarge(usize),

    #[error("element plane z = {element} does not match field plane z = {field}")]
    PlaneMismatch { element: f64, field: f64 },

    #[error("diffraction orders overlap: {0}")]
    OrderOverlap(String),

    #[error("degenerate measurement: {0}")]
    Degenerate(String),

    #[error("no intensity ring found: {0}")]
    NoRing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
