use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use super::{FlowQuery, GeomState, VelocityField};
use crate::batch::SequenceLayout;
use crate::clique::CliqueShape;
use crate::crystal::Vocab;
use crate::encoder::AtomConditioning;
use crate::nn::{
    Conditioning, CrossContext, Mlp, ParamBuilder, ParamId, ParamStore, Segments, Tape, Transformer, TransformerConfig,
    Var,
};

/// Transformer velocity model `V(G_t, t | species, z)`.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub len_in: Mlp,
    pub ang_in: Mlp,
    pub pos_in: Mlp,
    pub species: ParamId,
    pub registers: Option<ParamId>,
    pub time_mlp: Mlp,
    pub clique_embedding: ParamId,
    pub lat_mlp: Mlp,
    pub transformer: Transformer,
    pub len_out: Mlp,
    pub ang_out: Mlp,
    pub pos_out: Mlp,
    pub shape: CliqueShape,
    pub conditioning: AtomConditioning,
    n_registers: usize,
    d_model: usize,
}

/// Packed flow inputs for a batch: per-item cell rows, per-atom rows.
pub struct FlowInputs {
    pub lengths: Array2<f64>,
    pub angles: Array2<f64>,
    pub positions: Array2<f64>,
    pub times: Vec<f64>,
    pub species: Vec<usize>,
    pub n_atoms: Vec<usize>,
}

impl FlowInputs {
    pub fn from_states<'a>(states: impl IntoIterator<Item = (&'a GeomState, f64, &'a [usize])>) -> Self {
        let mut lengths = Vec::new();
        let mut angles = Vec::new();
        let mut positions = Vec::new();
        let mut times = Vec::new();
        let mut species = Vec::new();
        let mut n_atoms = Vec::new();
        for (s, t, sp) in states {
            assert_eq!(s.n_atoms(), sp.len(), "state and species disagree on atom count");
            lengths.extend(s.lengths);
            angles.extend(s.angles);
            positions.extend(s.positions.iter().flatten());
            times.push(t);
            species.extend_from_slice(sp);
            n_atoms.push(sp.len());
        }
        let b = times.len();
        FlowInputs {
            lengths: Array2::from_shape_vec((b, 3), lengths).expect("3 per item"),
            angles: Array2::from_shape_vec((b, 3), angles).expect("3 per item"),
            positions: Array2::from_shape_vec((positions.len() / 3, 3), positions).expect("3 per atom"),
            times,
            species,
            n_atoms,
        }
    }
}

/// Predicted velocities: lengths and angles (batch × 3), positions (atoms × 3).
#[derive(Clone, Copy, Debug)]
pub struct VelocityVars {
    pub lengths: Var,
    pub angles: Var,
    pub positions: Var,
}

/// `[sin(1000·t·f_k), cos(1000·t·f_k)]` with geometric frequencies `f_k`.
pub fn time_embedding(times: &[f64], d: usize) -> Array2<f64> {
    let half = d / 2;
    Array2::from_shape_fn((times.len(), 2 * half), |(i, j)| {
        let k = j % half;
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let x = 1000.0 * times[i] * freq;
        if j < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

impl VelocityNet {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        cfg: &TransformerConfig,
        vocab: &Vocab,
        shape: CliqueShape,
        conditioning: AtomConditioning,
    ) -> Self {
        let d = cfg.d_model;
        let (h, n) = (cfg.mlp_dim, cfg.n_mlp);
        let d_embed = shape.d_clique().min(16);
        pb.scope("flow", |pb| VelocityNet {
            len_in: Mlp::new(pb, "len_in", 3, h, n, d),
            ang_in: Mlp::new(pb, "ang_in", 3, h, n, d),
            pos_in: Mlp::new(pb, "pos_in", 3, h, n, d),
            species: pb.normal_std("species_embedding", vocab.species, d, 1.0),
            registers: (cfg.n_registers > 0).then(|| pb.normal_std("registers", cfg.n_registers, d, 1.0)),
            time_mlp: Mlp::new(pb, "time", 2 * (d / 2), h, n, d),
            clique_embedding: pb.normal_std("clique_embedding", shape.n_cliques(), d_embed, 1.0),
            lat_mlp: Mlp::new(pb, "latent", shape.d_clique() + d_embed, h, n, d),
            transformer: Transformer::new(pb, "transformer", cfg, true),
            len_out: Mlp::new(pb, "len_out", d, h, n, 3),
            ang_out: Mlp::new(pb, "ang_out", d, h, n, 3),
            pos_out: Mlp::new(pb, "pos_out", d, h, n, 3),
            shape,
            conditioning,
            n_registers: cfg.n_registers,
            d_model: d,
        })
    }

    /// `H_z = LayerNorm(GELU(MLP([Z_c, e_c])))`, one row per clique.
    pub fn latent_keys(&self, t: &mut Tape<'_>, z: Var) -> Var {
        let b = t.value(z).nrows();
        let c = self.shape.n_cliques();
        let rows = t.chain(z, self.shape);
        let table = t.param(self.clique_embedding);
        let idx: Rc<[usize]> = (0..b * c).map(|i| i % c).collect::<Vec<_>>().into();
        let emb = t.gather(table, idx);
        let x = t.concat_cols(&[rows, emb]);
        let h = self.lat_mlp.forward(t, x);
        let h = t.gelu(h);
        t.layer_norm(h)
    }

    /// Velocities for packed inputs; `z` is (batch × d_z).
    pub fn forward(&self, t: &mut Tape<'_>, inp: &FlowInputs, z: Var) -> VelocityVars {
        let b = inp.n_atoms.len();
        let layout = SequenceLayout::new(&inp.n_atoms, self.n_registers, 2);
        let len = t.constant(inp.lengths.clone());
        let ang = t.constant(inp.angles.clone());
        let pos = t.constant(inp.positions.clone());
        let h_len = self.len_in.forward(t, len);
        let h_ang = self.ang_in.forward(t, ang);
        let h_pos = self.pos_in.forward(t, pos);
        let mut parts = Vec::with_capacity(4);
        if let Some(r) = self.registers {
            parts.push(t.param(r));
        }
        parts.extend([h_len, h_ang, h_pos]);
        let stacked = t.concat_rows(&parts);
        let h = t.gather(stacked, layout.gather.clone());

        let table = t.param(self.species);
        let h_atom = t.gather(table, inp.species.clone().into());
        let atom_segs = Segments::from_lengths(&inp.n_atoms).expect("atoms present");
        let mean_atom = t.segment_mean(h_atom, &atom_segs);
        let temb = t.constant(time_embedding(&inp.times, self.d_model));
        let temb = self.time_mlp.forward(t, temb);
        let item_cond = t.add(mean_atom, temb);
        let cond = match self.conditioning {
            AtomConditioning::MeanPooled => Conditioning { cond: item_cond, owner: layout.owner.clone() },
            AtomConditioning::PerAtom => {
                let owner_of_atom: Rc<[usize]> = atom_segs.row_owner().into();
                let t_atom = t.gather(temb, owner_of_atom);
                let atom_cond = t.add(h_atom, t_atom);
                let rows = t.concat_rows(&[item_cond, atom_cond]);
                let mut owner = layout.owner.to_vec();
                for (k, &r) in layout.atom_rows.iter().enumerate() {
                    owner[r] = b + k;
                }
                Conditioning { cond: rows, owner: owner.into() }
            }
        };

        let keys = self.latent_keys(t, z);
        let key_segs = Segments::uniform(b, self.shape.n_cliques()).expect("non-empty batch");
        let ctx = CrossContext { keys, segs: &key_segs };
        let h = self.transformer.forward(t, h, &layout.segs, &cond, false, Some(&ctx));

        let starts: Vec<usize> = layout.segs.spans().iter().map(|s| s.start + self.n_registers).collect();
        let len_rows = t.gather(h, starts.clone().into());
        let ang_rows = t.gather(h, starts.iter().map(|s| s + 1).collect::<Vec<_>>().into());
        let atom_rows = t.gather(h, layout.atom_rows.clone());
        VelocityVars {
            lengths: self.len_out.forward(t, len_rows),
            angles: self.ang_out.forward(t, ang_rows),
            positions: self.pos_out.forward(t, atom_rows),
        }
    }

    pub fn bound<'a>(&'a self, store: &'a ParamStore) -> BoundVelocity<'a> {
        BoundVelocity { net: self, store }
    }
}

/// A [`VelocityNet`] with fixed parameters, usable as a [`VelocityField`].
pub struct BoundVelocity<'a> {
    net: &'a VelocityNet,
    store: &'a ParamStore,
}

impl VelocityField for BoundVelocity<'_> {
    fn velocities(&self, queries: &[FlowQuery<'_>]) -> Vec<GeomState> {
        if queries.is_empty() {
            return Vec::new();
        }
        let species: Vec<Vec<usize>> = queries.iter().map(|q| q.species.iter().map(|a| a.0).collect()).collect();
        let inp = FlowInputs::from_states(queries.iter().zip(&species).map(|(q, s)| (q.state, q.t, s.as_slice())));
        let d_z = queries[0].latent.len();
        let z = Array2::from_shape_fn((queries.len(), d_z), |(i, j)| queries[i].latent[j]);
        let mut t = Tape::inference(self.store);
        let zv = t.constant(z);
        let v = self.net.forward(&mut t, &inp, zv);
        let (vl, va, vp) = (t.value(v.lengths), t.value(v.angles), t.value(v.positions));
        let mut row = 0;
        queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let n = q.state.n_atoms();
                let s = GeomState {
                    lengths: [vl[[i, 0]], vl[[i, 1]], vl[[i, 2]]],
                    angles: [va[[i, 0]], va[[i, 1]], va[[i, 2]]],
                    positions: (row..row + n).map(|r| [vp[[r, 0]], vp[[r, 1]], vp[[r, 2]]]).collect(),
                };
                row += n;
                s
            })
            .collect()
    }
}
