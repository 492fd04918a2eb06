//! Model assembly, optimisation, checkpoints and decoding.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, MAGIC, VERSION};
pub use model::{argmax, assemble, Model, ModelOutput, ModelSpec, ParamReport, Session};
pub use optim::{clip_grad_norm, grad_norm, lr_at, AdamW};
pub use train::{evaluate, logits, same_stream, score, train, EvalResult, Hooks, Metrics, TrainConfig, TrainOutcome, SHARD};

#[cfg(test)]
mod tests;
