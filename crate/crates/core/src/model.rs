//! The full model: encoder, clique predictor, species decoder and geometry flow
//! sharing one parameter store.

use serde::{Deserialize, Serialize};

use crate::atom_decoder::AtomDecoder;
use crate::clique::{CliquePredictor, CliqueShape, LatentVector};
use crate::crystal::{Vocab, DEFAULT_N_MAX, DEFAULT_VOCAB};
use crate::encoder::{AtomConditioning, Encoder};
use crate::flow::{LengthPrior, VelocityNet};
use crate::nn::{ParamBuilder, ParamStore, TransformerConfig};
use crate::rng::stream;

/// Architecture settings, keyed by the usual hyperparameter names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_cliques: usize,
    pub clique_dim: usize,
    pub knot_dim: usize,
    pub transformer_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_registers: usize,
    pub mlp_dim: usize,
    pub n_mlp: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub n_max: usize,
    pub atom_conditioning: AtomConditioning,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self::from_parts(CliqueShape::default(), &TransformerConfig::paper())
    }

    pub fn desk() -> Self {
        Self::from_parts(CliqueShape::default(), &TransformerConfig::desk())
    }

    pub fn from_parts(shape: CliqueShape, t: &TransformerConfig) -> Self {
        ModelConfig {
            n_cliques: shape.n_cliques(),
            clique_dim: shape.d_clique(),
            knot_dim: shape.d_knot(),
            transformer_dim: t.d_model,
            n_blocks: t.n_blocks,
            n_heads: t.n_heads,
            n_registers: t.n_registers,
            mlp_dim: t.mlp_dim,
            n_mlp: t.n_mlp,
            dropout_rate: t.dropout,
            vocab_size: DEFAULT_VOCAB,
            n_max: DEFAULT_N_MAX,
            atom_conditioning: AtomConditioning::default(),
        }
    }

    /// Same settings with the latent reshaped.
    pub fn with_shape(mut self, shape: CliqueShape) -> Self {
        self.n_cliques = shape.n_cliques();
        self.clique_dim = shape.d_clique();
        self.knot_dim = shape.d_knot();
        self
    }

    pub fn shape(&self) -> Result<CliqueShape, String> {
        CliqueShape::new(self.n_cliques, self.clique_dim, self.knot_dim).map_err(|e| e.to_string())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.transformer_dim,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            n_registers: self.n_registers,
            mlp_dim: self.mlp_dim,
            n_mlp: self.n_mlp,
            dropout: self.dropout_rate,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size, self.n_max)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.shape()?;
        self.transformer().validate()?;
        if self.vocab_size == 0 || self.n_max == 0 {
            return Err("vocab_size and n_max must be positive".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub predictor: CliquePredictor,
    pub decoder: AtomDecoder,
    pub flow: VelocityNet,
    pub prior: LengthPrior,
}

impl Model {
    /// Freshly initialized model; parameters depend only on `seed`.
    pub fn new(config: ModelConfig, prior: LengthPrior, seed: u64) -> Result<Self, String> {
        config.validate()?;
        let shape = config.shape()?;
        let t = config.transformer();
        let vocab = config.vocab();
        let mut params = ParamStore::new();
        let mut rng = stream(seed, "init", 0);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut pb, &t, &vocab, shape.d_z(), config.atom_conditioning);
        let predictor = CliquePredictor::new(&mut pb, shape, t.mlp_dim, t.n_mlp);
        let decoder = AtomDecoder::new(&mut pb, &t, &vocab, shape.d_z());
        let flow = VelocityNet::new(&mut pb, &t, &vocab, shape, config.atom_conditioning);
        Ok(Model { config, params, encoder, predictor, decoder, flow, prior })
    }

    pub fn shape(&self) -> CliqueShape {
        self.predictor.shape
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn d_z(&self) -> usize {
        self.shape().d_z()
    }

    /// Surrogate prediction for one latent.
    pub fn predict(&self, z: &LatentVector) -> f64 {
        self.predictor.predict(&self.params, z)
    }
}
