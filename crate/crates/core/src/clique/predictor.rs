use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;

use super::{chain, CliqueChain, CliqueShape, LatentVector};
use crate::nn::{Mlp, ParamBuilder, ParamId, ParamStore, Segments, Tape, Var};

/// `f(z) = Σ_c head([Z_c, e_c])`: one MLP shared across cliques, told which
/// clique it is scoring by a learned embedding `e_c`.
#[derive(Clone, Debug)]
pub struct CliquePredictor {
    pub shape: CliqueShape,
    pub embedding: ParamId,
    pub head: Mlp,
}

impl CliquePredictor {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, shape: CliqueShape, hidden: usize, n_hidden: usize) -> Self {
        let d_embed = shape.d_clique().min(16);
        pb.scope("predictor", |pb| CliquePredictor {
            shape,
            embedding: pb.normal_std("clique_embedding", shape.n_cliques(), d_embed, 1.0),
            head: Mlp::new(pb, "head", shape.d_clique() + d_embed, hidden, n_hidden, 1),
        })
    }

    /// Per-clique outputs for a batch of flat latents: (batch·n_cliques × 1).
    pub fn clique_terms(&self, t: &mut Tape<'_>, z: Var) -> Var {
        let batch = t.value(z).nrows();
        let c = self.shape.n_cliques();
        let rows = t.chain(z, self.shape);
        let emb = t.param(self.embedding);
        let idx: Rc<[usize]> = (0..batch * c).map(|i| i % c).collect::<Vec<_>>().into();
        let emb = t.gather(emb, idx);
        let x = t.concat_cols(&[rows, emb]);
        self.head.forward(t, x)
    }

    /// Predictions for a batch of flat latents (batch × d_z) → (batch × 1).
    pub fn forward(&self, t: &mut Tape<'_>, z: Var) -> Var {
        let batch = t.value(z).nrows();
        let terms = self.clique_terms(t, z);
        let segs = Segments::uniform(batch, self.shape.n_cliques()).expect("batch is non-empty");
        t.segment_sum(terms, &segs)
    }

    /// Evaluates a batch of latents without recording gradients for later use.
    pub fn predict_batch(&self, store: &ParamStore, z: &Array2<f64>) -> Vec<f64> {
        if z.nrows() == 0 {
            return Vec::new();
        }
        let mut t = Tape::inference(store);
        let zv = t.constant(z.clone());
        let y = self.forward(&mut t, zv);
        t.value(y).column(0).to_vec()
    }

    pub fn predict(&self, store: &ParamStore, z: &LatentVector) -> f64 {
        let m = Array2::from_shape_vec((1, z.len()), z.as_slice().to_vec()).expect("row vector");
        self.predict_batch(store, &m)[0]
    }

    /// Prediction from the clique-row form.
    pub fn predict_chain(&self, store: &ParamStore, zc: &CliqueChain) -> Result<f64, super::CliqueError> {
        let z = super::flatten(zc, &self.shape)?;
        Ok(self.predict(store, &z))
    }

    /// Value and exact gradient with respect to the latent.
    pub fn value_and_grad(&self, store: &ParamStore, z: &LatentVector) -> (f64, Vec<f64>) {
        let mut t = Tape::new(store);
        let zv = t.input(Array2::from_shape_vec((1, z.len()), z.as_slice().to_vec()).expect("row vector"));
        let y = self.forward(&mut t, zv);
        let y = t.sum_all(y);
        let grads = t.backward(y).expect("forward pass recorded");
        let g = grads.wrt(zv).map(|g| g.index_axis(Axis(0), 0).to_vec()).unwrap_or_else(|| vec![0.0; z.len()]);
        (t.scalar(y), g)
    }

    /// Clique rows for a latent, as used by the predictor.
    pub fn chain_of(&self, z: &LatentVector) -> Result<CliqueChain, super::CliqueError> {
        chain(z, &self.shape)
    }
}
