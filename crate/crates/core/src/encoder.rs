//! Material → Gaussian posterior over the clique-structured latent.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{MaterialBatch, SequenceLayout};
use crate::clique::LatentVector;
use crate::crystal::{Material, Vocab};
use crate::nn::{
    AttentionPool, Conditioning, LayerNorm, Linear, Mlp, ParamBuilder, ParamId, ParamStore, Tape, Transformer,
    TransformerConfig, Var,
};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

/// How species embeddings condition the encoder's AdaLN layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomConditioning {
    /// One mean-pooled species vector per material, broadcast to every row.
    #[default]
    MeanPooled,
    /// Each atom row is modulated by its own species embedding; cell and
    /// register rows use the mean.
    PerAtom,
}

/// Posterior mean and log-standard-deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: LatentVector,
    pub log_sigma: LatentVector,
}

/// Tape handles for a batch of posteriors (batch × d_z each).
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub mu: Var,
    pub log_sigma: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub len_mlp: Mlp,
    pub ang_mlp: Mlp,
    pub pos_mlp: Mlp,
    pub species: ParamId,
    pub registers: Option<ParamId>,
    pub transformer: Transformer,
    pub pool: AttentionPool,
    pub post_norm: LayerNorm,
    pub head: Linear,
    pub conditioning: AtomConditioning,
    n_registers: usize,
    d_z: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        cfg: &TransformerConfig,
        vocab: &Vocab,
        d_z: usize,
        conditioning: AtomConditioning,
    ) -> Self {
        let d = cfg.d_model;
        pb.scope("encoder", |pb| Encoder {
            len_mlp: Mlp::new(pb, "len_in", 3, cfg.mlp_dim, cfg.n_mlp, d),
            ang_mlp: Mlp::new(pb, "ang_in", 3, cfg.mlp_dim, cfg.n_mlp, d),
            pos_mlp: Mlp::new(pb, "pos_in", 3, cfg.mlp_dim, cfg.n_mlp, d),
            species: pb.normal_std("species_embedding", vocab.species, d, 1.0),
            registers: (cfg.n_registers > 0).then(|| pb.normal_std("registers", cfg.n_registers, d, 1.0)),
            transformer: Transformer::new(pb, "transformer", cfg, false),
            pool: AttentionPool::new(pb, "pool", d),
            post_norm: LayerNorm::new(pb, "post_norm", d),
            head: Linear::new(pb, "head", d, 2 * d_z),
            conditioning,
            n_registers: cfg.n_registers,
            d_z,
        })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// Cell rows (lengths block then angles block, one row per material),
    /// per-atom position rows, and per-atom species rows.
    fn embed(&self, t: &mut Tape<'_>, batch: &MaterialBatch) -> (Var, Var, Var) {
        let g = &batch.geometry;
        let log_len = t.constant(g.lengths.mapv(f64::ln));
        let ang = t.constant(g.angles.clone());
        let pos = t.constant(g.positions.clone());
        let h_len = self.len_mlp.forward(t, log_len);
        let h_ang = self.ang_mlp.forward(t, ang);
        let cell = t.concat_rows(&[h_len, h_ang]);
        let h_pos = self.pos_mlp.forward(t, pos);
        let table = t.param(self.species);
        let h_atom = t.gather(table, batch.species.clone().into());
        (cell, h_pos, h_atom)
    }

    /// `H_in = [h_len, h_ang, H_pos]` ((2 + N) × d) and `H_atom` (N × d).
    pub fn embed_inputs(&self, store: &ParamStore, m: &Material) -> (Array2<f64>, Array2<f64>) {
        let batch = MaterialBatch::new(&[m]);
        let mut t = Tape::inference(store);
        let (cell, h_pos, h_atom) = self.embed(&mut t, &batch);
        let h_in = t.concat_rows(&[cell, h_pos]);
        (t.value(h_in).clone(), t.value(h_atom).clone())
    }

    pub fn forward(&self, t: &mut Tape<'_>, batch: &MaterialBatch) -> EncodedVars {
        let b = batch.len();
        let layout = SequenceLayout::new(&batch.n_atoms, self.n_registers, 2);
        let (cell, h_pos, h_atom) = self.embed(t, batch);
        let mut parts = Vec::with_capacity(3);
        if let Some(r) = self.registers {
            parts.push(t.param(r));
        }
        parts.extend([cell, h_pos]);
        let stacked = t.concat_rows(&parts);
        let h = t.gather(stacked, layout.gather.clone());

        let mean_atom = t.segment_mean(h_atom, &batch.atom_segs);
        let cond = match self.conditioning {
            AtomConditioning::MeanPooled => Conditioning { cond: mean_atom, owner: layout.owner.clone() },
            AtomConditioning::PerAtom => {
                let rows = t.concat_rows(&[mean_atom, h_atom]);
                let mut owner: Vec<usize> = layout.owner.to_vec();
                for (k, &r) in layout.atom_rows.iter().enumerate() {
                    owner[r] = b + k;
                }
                Conditioning { cond: rows, owner: owner.into() }
            }
        };
        let h = self.transformer.forward(t, h, &layout.segs, &cond, false, None);

        let content = t.gather(h, layout.content_rows.clone());
        let pooled = self.pool.forward(t, content, &layout.content_segs);
        let post = t.gelu(pooled);
        let post = self.post_norm.forward(t, post);
        let out = self.head.forward(t, post);
        let mu = t.slice_cols(out, 0, self.d_z);
        let log_sigma = t.slice_cols(out, self.d_z, self.d_z);
        let log_sigma = t.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        EncodedVars { mu, log_sigma }
    }

    pub fn encode_batch(&self, store: &ParamStore, materials: &[&Material]) -> Vec<EncoderOutput> {
        if materials.is_empty() {
            return Vec::new();
        }
        let batch = MaterialBatch::new(materials);
        let mut t = Tape::inference(store);
        let v = self.forward(&mut t, &batch);
        let (mu, ls) = (t.value(v.mu), t.value(v.log_sigma));
        (0..materials.len())
            .map(|i| EncoderOutput {
                mu: LatentVector::new(mu.row(i).to_vec()).expect("finite encoder output"),
                log_sigma: LatentVector::new(ls.row(i).to_vec()).expect("finite encoder output"),
            })
            .collect()
    }

    pub fn encode(&self, store: &ParamStore, m: &Material) -> EncoderOutput {
        self.encode_batch(store, &[m]).pop().expect("one output")
    }
}

/// Reparameterized draw on the tape: `μ + exp(log σ) ⊙ ε` with `ε` supplied.
pub fn sample_on_tape(t: &mut Tape<'_>, enc: EncodedVars, eps: Array2<f64>) -> Var {
    let sigma = t.exp(enc.log_sigma);
    let eps = t.constant(eps);
    let noise = t.mul(sigma, eps);
    t.add(enc.mu, noise)
}

/// `z = μ + exp(log σ) ⊙ ε`, `ε ~ N(0, I)`.
pub fn sample_latent<R: Rng>(out: &EncoderOutput, rng: &mut R) -> LatentVector {
    let z = out
        .mu
        .as_slice()
        .iter()
        .zip(out.log_sigma.as_slice())
        .map(|(m, ls)| {
            let e: f64 = StandardNormal.sample(rng);
            m + ls.exp() * e
        })
        .collect();
    LatentVector::new(z).expect("finite latent")
}
