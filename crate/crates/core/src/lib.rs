//! Deterministic simulator for SABRE, a robust Bayesian peer-to-peer
//! federated linear regression method, and the baselines it is compared with.

pub mod adversary;
pub mod aggregation;
pub mod analysis;
pub mod belief;
pub mod config;
pub mod engine;
pub mod error;
pub mod learning;
pub mod network;
pub mod presets;
pub mod record;
pub mod report;
pub mod scenario;
pub mod task;

pub use belief::{CovarianceMode, GaussianBelief, InformationBelief};
pub use config::{ResolvedRun, RunConfig};
pub use engine::{run, EngineOptions, Simulation};
pub use error::{ClientId, Result, SabreError};
pub use presets::preset;
pub use record::{RecordRow, RunRecord};
pub use report::{summarize, verify, Summary, VerifyReport};
pub use scenario::{Algorithm, Scenario};
