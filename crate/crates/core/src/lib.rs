//! Finite-level slit Sierpiński spaces and the slit Menger curve.
//!
//! The crate builds torn grid complexes for slit domains and their doubles,
//! computes discrete p-modulus of curve families by constraint generation,
//! carries out the collar/buffer/omitted/residual decomposition attached to a
//! slit sequence together with its admissible density, and classifies the
//! fiber topology of finite Menger approximations.
//!
//! Module layout:
//!
//! * [`dyadic`] — exact dyadic rationals (all construction coordinates).
//! * [`slits`] — boxes, slits, dyadic and Menger face families, separation
//!   validation, porosity scans.
//! * [`grid`] — torn vertex/cell complexes, geodesic distance, doubles,
//!   projections, Ahlfors regularity scans.
//! * [`collar`] — ε-collar decompositions, the indicator density, curve
//!   surgery, residual product bounds.
//! * [`modulus`] — discrete p-modulus via constraint generation.
//! * [`menger`] — slit Menger complexes, fibers, covering order, K₅ witness.
//! * [`acceptance`] — the end-to-end verification suite used by the CLI
//!   `report` subcommand and the acceptance test target.

pub mod acceptance;
pub mod collar;
pub mod dyadic;
pub mod grid;
pub mod menger;
pub mod modulus;
pub mod slits;

pub use dyadic::Dyadic;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate set: {0}")]
    DegenerateSet(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("resolution misaligned: {0}")]
    ResolutionMisaligned(String),
    #[error("collar may exit box: epsilon {eps} not below separation {sigma}")]
    CollarExitsBox { eps: f64, sigma: f64 },
    #[error("epsilon must be a power of 1/2, got {0}")]
    EpsilonNotPowerOfHalf(f64),
    #[error("cell cap exceeded: {cells} cells > {cap} (try h = {suggestion})")]
    CellCap { cells: u64, cap: u64, suggestion: String },
    #[error("curve not in the admissible family: {0}")]
    NotInFamily(String),
    #[error("inadmissible density: witness path of weighted length {length}")]
    Inadmissible { length: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
