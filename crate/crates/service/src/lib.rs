//! HTTP service for interactive editing sessions.
//!
//! A session holds a base latent and a stack of edits, each an instruction
//! and a strength `eta`. Sessions persist across restarts; replaying a stack
//! from its base reproduces the stored head exactly because the editor's
//! inference noise is fixed per deployment.

pub mod api;
pub mod error;
pub mod sampler;
pub mod session;
pub mod store;

pub use api::{router, serve, CreateSessionRequest, SessionView};
pub use error::{Result, ServiceError};
pub use sampler::{TextSampler, ToyTextSampler};
pub use session::{EditSession, Service, SessionSource, StackEntry, Turntable, TurntableSettings};
pub use store::{latent_hash, SessionStore};
