//! Feed-forward and recurrent building blocks with hand-written reverse-mode
//! gradients, plus the Adam optimizer.

mod adam;
mod dense;
mod gru;
mod params;

pub use adam::{adam_step, adam_step_filtered, AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseTape, LayerKind, LayerSpec, Mlp, MlpTape};
pub use gru::{Gru, GruBackward, GruTape};
pub use params::Params;
pub(crate) use params::join;
