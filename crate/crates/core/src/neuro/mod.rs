//! Coordinate-wise LSTM modules φ_M, φ_S, φ_U with analytic reverse mode,
//! their initializers, the Adam optimizer, and checkpoint files.

mod adam;
mod checkpoint;
mod lstm;
mod params;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint};
pub use lstm::{
    lstm_cell_forward, module_backward, module_forward, HiddenBank, LstmModuleParams, ModuleAdjoint, ModuleKind,
    ModuleTape, OutputActivation, Tensor, HIDDEN,
};
pub use params::{init_random, init_special, random_bank, MiLoDoParams, NodeModules};
