//! Rating desk for listening tests, plus a small HTTP model server.

pub mod api;
pub mod clips;
pub mod desk;
pub mod model_server;

pub use api::{router, serve, AppState};
pub use clips::{ClipStore, DirClipStore, MemoryClipStore};
pub use desk::{DeskError, RaterStatus, RatingDesk, RatingTask, TaskKind};
