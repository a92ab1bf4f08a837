//! Minimal differentiable-network substrate.

pub mod checkpoint;
pub mod condnet;
pub mod embed;
pub mod mlp;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use condnet::{CondNet, CondNetGrads};
pub use embed::{CondTable, Embedder};
pub use mlp::{Mlp, Trace};
pub use optim::{Adam, ParamBlock, RAdam, RAdamHyper};
