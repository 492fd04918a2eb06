//! Recurrent mixers and the shared block components.

mod block;
mod embedding;
mod gated;
mod linear_attention;
mod mlp;

use serde::{Deserialize, Serialize};

pub use block::{Block, BlockOutput, BlockState, Mixer};
pub use embedding::Embedding;
pub use gated::GatedRecurrence;
pub use linear_attention::LinearAttention;
pub use mlp::{RmsNorm, SwiGlu, RMS_EPS};

use crate::error::{Error, Result};
use crate::resona::ResonaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    GatedRecurrence,
    LinearAttention { decay: f64 },
}

/// Where an augmented layer takes its retrieval queries from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// The recurrent layer's per-position state readout.
    #[default]
    Hidden,
    /// The embedding output `X0`.
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: LayerKind,
    pub d_model: usize,
    pub state_width: usize,
    pub mlp_expansion: usize,
    pub resona: Option<ResonaConfig>,
    #[serde(default)]
    pub query_source: QuerySource,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.state_width == 0 || self.mlp_expansion == 0 {
            return Err(Error::Config("block widths must be positive".into()));
        }
        if let LayerKind::LinearAttention { decay } = self.kind {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::Config(format!("linear attention decay must lie in (0, 1], got {decay}")));
            }
        }
        if let Some(r) = &self.resona {
            r.validate()?;
        }
        Ok(())
    }

    /// Width of the retrieval query source.
    pub fn query_width(&self) -> usize {
        match self.query_source {
            QuerySource::Embeddings => self.d_model,
            QuerySource::Hidden => self.state_width,
        }
    }

    /// Floats of recurrent state carried between tokens.
    pub fn state_len(&self) -> usize {
        match self.kind {
            LayerKind::GatedRecurrence => self.state_width,
            LayerKind::LinearAttention { .. } => self.state_width * self.state_width,
        }
    }
}
