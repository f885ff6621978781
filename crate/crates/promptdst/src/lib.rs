//! Two-stage prompt-based dialogue belief-state tracking: stage 1 predicts
//! the active domains of a dialogue history (masked-LM grouped token scores
//! or causal-LM question answering), stage 2 fills each slot of those
//! domains by prompted generation or categorical first-token scoring.
//!
//! The numeric kernels are generic over the scalar type (f32/f64) through
//! [`float::Scalar`]; the `*64` aliases at the crate root fix f64 for
//! everyday use.

pub mod backend;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod domain_predictor;
pub mod dump;
pub mod evaluation;
pub mod float;
pub mod model;
pub mod prompting;
pub mod reference;
pub mod slot_predictor;

pub use float::Scalar;

pub type MockBackend64 = backend::MockBackend<f64>;
pub type RemoteBackend64 = backend::RemoteBackend<f64>;
pub type LossSpec64 = backend::LossSpec<f64>;
pub type MaskFillResult64 = backend::MaskFillResult<f64>;
pub type PositionProbs64 = backend::PositionProbs<f64>;
pub type WgsWeights64 = domain_predictor::WgsWeights<f64>;
pub type PickTable64 = domain_predictor::PickTable<f64>;
pub type WgsOutcome64 = domain_predictor::WgsOutcome<f64>;
pub type PipelineContext64<'a> = slot_predictor::PipelineContext<'a, f64>;
pub type TurnPrediction64 = slot_predictor::TurnPrediction<f64>;

/// Object-safe f64 backend handle.
pub type DynBackend64 = dyn backend::LmBackend<f64>;
