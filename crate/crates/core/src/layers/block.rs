use std::rc::Rc;

use super::{BlockConfig, GatedRecurrence, LayerKind, LinearAttention, QuerySource, RmsNorm, SwiGlu};
use crate::error::Result;
use crate::params::{Binder, HasParams, Param};
use crate::resona::{ChunkCache, ResonaLayer, RetrievalMask};
use crate::tensor::{Prng, Scalar, Seq, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Mixer<S: Scalar> {
    Gated(GatedRecurrence<S>),
    Linear(LinearAttention<S>),
}

impl<S: Scalar> Mixer<S> {
    fn forward(
        &self,
        b: &Binder<S>,
        x: &Var<S>,
        seq: Seq,
        s0: Option<&Tensor<S>>,
    ) -> Result<(Var<S>, Var<S>, Vec<S>)> {
        match self {
            Mixer::Gated(m) => m.forward(b, x, seq, s0),
            Mixer::Linear(m) => m.forward(b, x, seq, s0),
        }
    }

    fn step(&self, x: &[S], state: &mut [S]) -> (Vec<S>, Vec<S>) {
        match self {
            Mixer::Gated(m) => m.step(x, state),
            Mixer::Linear(m) => m.step(x, state),
        }
    }
}

/// `Y = X + mix(RMSNorm X)`, then `Y + SwiGLU(RMSNorm Y)`, where `mix` is
/// the recurrent layer, optionally combined with retrieval.
#[derive(Clone, Debug)]
pub struct Block<S: Scalar> {
    pub cfg: BlockConfig,
    pub norm1: RmsNorm<S>,
    pub mixer: Mixer<S>,
    pub resona: Option<ResonaLayer<S>>,
    pub norm2: RmsNorm<S>,
    pub mlp: SwiGlu<S>,
}

pub struct BlockOutput<S: Scalar> {
    pub y: Var<S>,
    pub h_seq: Var<S>,
    /// Final recurrent state of every sequence, concatenated.
    pub finals: Vec<S>,
    pub masks: Option<Rc<Vec<RetrievalMask>>>,
}

/// Per-sequence decoding state of one block.
#[derive(Clone, Debug)]
pub struct BlockState<S: Scalar> {
    pub recurrent: Vec<S>,
    pub cache: Option<ChunkCache<S>>,
}

impl<S: Scalar> Block<S> {
    pub fn init(prefix: &str, cfg: BlockConfig, rng: &Prng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mixer = match cfg.kind {
            LayerKind::GatedRecurrence => Mixer::Gated(GatedRecurrence::init(&format!("{prefix}.mixer"), d, cfg.state_width, rng)?),
            LayerKind::LinearAttention { decay } => {
                Mixer::Linear(LinearAttention::init(&format!("{prefix}.mixer"), d, cfg.state_width, decay, rng)?)
            }
        };
        let resona = match &cfg.resona {
            Some(r) => Some(ResonaLayer::init(&format!("{prefix}.resona"), d, cfg.query_width(), r.clone(), rng)?),
            None => None,
        };
        Ok(Self {
            norm1: RmsNorm::init(&format!("{prefix}.norm1"), d)?,
            norm2: RmsNorm::init(&format!("{prefix}.norm2"), d)?,
            mlp: SwiGlu::init(&format!("{prefix}.mlp"), d, d * cfg.mlp_expansion, rng)?,
            mixer,
            resona,
            cfg,
        })
    }

    /// `x0` is the embedding output, used for chunks, keys and values.
    pub fn forward(
        &self,
        b: &Binder<S>,
        x: &Var<S>,
        x0: &Var<S>,
        seq: Seq,
        s0: Option<&Tensor<S>>,
    ) -> Result<BlockOutput<S>> {
        let tape = b.tape();
        let xn = self.norm1.forward(b, x)?;
        let (ym, h_seq, finals) = self.mixer.forward(b, &xn, seq, s0)?;
        let (mixed, masks) = match &self.resona {
            None => (ym, None),
            Some(r) => {
                let qsrc = match self.cfg.query_source {
                    QuerySource::Embeddings => x0,
                    QuerySource::Hidden => &h_seq,
                };
                let (yr, masks) = r.integrate(b, qsrc, x0, seq)?;
                (r.mix(b, &ym, &yr, &xn)?, Some(masks))
            }
        };
        let y = tape.add(x, &mixed)?;
        let y = tape.add(&y, &self.mlp.forward(b, &self.norm2.forward(b, &y)?)?)?;
        Ok(BlockOutput { y, h_seq, finals, masks })
    }

    pub fn new_state(&self) -> BlockState<S> {
        BlockState {
            recurrent: vec![S::zero(); self.cfg.state_len()],
            cache: self.resona.as_ref().map(|r| ChunkCache::new(r.cfg.enc_width)),
        }
    }

    /// One token through the block. Returns the output row and, when
    /// augmented, the retrieved chunk set.
    pub fn step(&self, x: &[S], x0: &[S], state: &mut BlockState<S>) -> Result<(Vec<S>, Option<Vec<usize>>)> {
        let xn = self.norm1.row(x);
        let (ym, h) = self.mixer.step(&xn, &mut state.recurrent);
        let (mixed, set) = match (&self.resona, state.cache.as_mut()) {
            (Some(r), Some(cache)) => {
                let qsrc = match self.cfg.query_source {
                    QuerySource::Embeddings => x0,
                    QuerySource::Hidden => &h,
                };
                let (y, set) = r.step(cache, x0, qsrc, &xn, &ym)?;
                (y, Some(set))
            }
            _ => (ym, None),
        };
        let y: Vec<S> = x.iter().zip(&mixed).map(|(a, b)| *a + *b).collect();
        let f = self.mlp.row(&self.norm2.row(&y));
        Ok((y.iter().zip(&f).map(|(a, b)| *a + *b).collect(), set))
    }
}

impl<S: Scalar> HasParams<S> for Block<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.norm1.visit(f);
        match &self.mixer {
            Mixer::Gated(m) => m.visit(f),
            Mixer::Linear(m) => m.visit(f),
        }
        if let Some(r) = &self.resona {
            r.visit(f);
        }
        self.norm2.visit(f);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.norm1.visit_mut(f);
        match &mut self.mixer {
            Mixer::Gated(m) => m.visit_mut(f),
            Mixer::Linear(m) => m.visit_mut(f),
        }
        if let Some(r) = &mut self.resona {
            r.visit_mut(f);
        }
        self.norm2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}
