//! Minimal differentiable layer: tape-based reverse-mode gradients, dense and
//! MLP layers, a small Transformer, Adam, finite-difference checks and
//! checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod transformer;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use layers::{mlp_apply, Activation, Dense, Mlp, MlpSpec};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use transformer::{transformer_apply, Transformer, TransformerSpec};
