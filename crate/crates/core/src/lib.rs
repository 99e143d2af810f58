//! Certainty-based adaptive reasoning.
//!
//! A model first answers briefly. The perplexity of that answer is scored
//! against two class-conditional Gaussians fitted on a calibration split, and
//! only answers whose posterior probability of being correct is not above one
//! half are regenerated with explicit reasoning.

pub mod backends;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod ppl;
pub mod router;
pub mod seed;
pub mod simulate;

pub use backends::{GenerationBackend, GenerationResult, InferenceQuery};
pub use calibration::{CalibrationProfile, CalibrationSample};
pub use error::{CarError, Result};
pub use ppl::{compute_ppl, Perplexity, TokenLogProbs};
pub use router::{decide, route_query, Route, RoutingOutcome};
