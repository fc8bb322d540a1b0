//! The four verbs of the harness.

pub mod eval;
pub mod train;
pub mod verify;

pub use eval::cmd_eval;
pub use train::cmd_train;
pub use verify::cmd_verify;
