//! Autoregressive species decoder conditioned on the latent through AdaLN.

mod beam;

pub use beam::{beam_search, brute_force, BeamSpec, Hypothesis, TokenModel};

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clique::LatentVector;
use crate::crystal::{AtomType, Vocab};
use crate::nn::{
    Conditioning, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore, Segments, Tape, Transformer, TransformerConfig,
    Var,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecoderError {
    #[error("malformed prefix: {0}")]
    MalformedPrefix(String),
    #[error("latent has {got} entries, decoder expects {expected}")]
    LatentWidth { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(rename = "N_beam")]
    pub beam_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { beam_width: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct AtomDecoder {
    pub latent_in: Linear,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub transformer: Transformer,
    pub out_norm: LayerNorm,
    pub head: Linear,
    vocab: Vocab,
    d_z: usize,
}

impl AtomDecoder {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, cfg: &TransformerConfig, vocab: &Vocab, d_z: usize) -> Self {
        let d = cfg.d_model;
        pb.scope("atom_decoder", |pb| AtomDecoder {
            latent_in: Linear::new(pb, "latent_in", d_z, d),
            tokens: pb.normal_std("token_embedding", vocab.species + 2, d, 1.0),
            positions: pb.normal_std("position_embedding", vocab.n_max + 1, d, 0.1),
            transformer: Transformer::new(pb, "transformer", cfg, false),
            out_norm: LayerNorm::new(pb, "out_norm", d),
            head: Linear::new(pb, "head", d, vocab.species + 2),
            vocab: *vocab,
            d_z,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Output ids run over species, Start and Stop; Start never gets mass.
    pub fn n_outputs(&self) -> usize {
        self.vocab.species + 2
    }

    fn output_mask(&self) -> Rc<[bool]> {
        (0..self.n_outputs()).map(|i| i == self.vocab.start().0).collect::<Vec<_>>().into()
    }

    /// `LayerNorm(GELU(Lin(z)))` for a batch of latents (batch × d_z).
    pub fn modulate_on_tape(&self, t: &mut Tape<'_>, z: Var) -> Var {
        let h = self.latent_in.forward(t, z);
        let h = t.gelu(h);
        t.layer_norm(h)
    }

    pub fn modulate_latent(&self, store: &ParamStore, z: &LatentVector) -> Result<Vec<f64>, DecoderError> {
        if z.len() != self.d_z {
            return Err(DecoderError::LatentWidth { expected: self.d_z, got: z.len() });
        }
        let mut t = Tape::inference(store);
        let zv = t.constant(Array2::from_shape_vec((1, z.len()), z.as_slice().to_vec()).expect("row"));
        let m = self.modulate_on_tape(&mut t, zv);
        Ok(t.value(m).row(0).to_vec())
    }

    /// Log-probabilities at every position of packed token sequences.
    /// `cond` holds one modulation row per sequence.
    fn logprobs_on_tape(&self, t: &mut Tape<'_>, seqs: &[&[usize]], cond: Var, last_only: bool) -> Var {
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let segs = Segments::from_lengths(&lens).expect("non-empty sequences");
        let toks: Rc<[usize]> = seqs.iter().flat_map(|s| s.iter().copied()).collect::<Vec<_>>().into();
        let pos: Rc<[usize]> = seqs.iter().flat_map(|s| 0..s.len()).collect::<Vec<_>>().into();
        let tok_table = t.param(self.tokens);
        let pos_table = t.param(self.positions);
        let e_tok = t.gather(tok_table, toks);
        let e_pos = t.gather(pos_table, pos);
        let h = t.add(e_tok, e_pos);
        let conditioning = Conditioning { cond, owner: segs.row_owner().into() };
        let mut h = self.transformer.forward(t, h, &segs, &conditioning, true, None);
        if last_only {
            let last: Rc<[usize]> = segs.spans().iter().map(|s| s.start + s.len - 1).collect::<Vec<_>>().into();
            h = t.gather(h, last);
        }
        let h = self.out_norm.forward(t, h);
        let logits = self.head.forward(t, h);
        t.log_softmax(logits, Some(self.output_mask()))
    }

    /// Summed negative log-likelihood per record (batch × 1) of
    /// `[s₁…s_N, Stop]` given `[Start, s₁…s_N]`.
    pub fn nll_on_tape(&self, t: &mut Tape<'_>, z_mod: Var, species: &[&[usize]]) -> Var {
        let start = self.vocab.start().0;
        let stop = self.vocab.stop().0;
        let inputs: Vec<Vec<usize>> =
            species.iter().map(|s| std::iter::once(start).chain(s.iter().copied()).collect()).collect();
        let targets: Rc<[usize]> =
            species.iter().flat_map(|s| s.iter().copied().chain(std::iter::once(stop))).collect::<Vec<_>>().into();
        let refs: Vec<&[usize]> = inputs.iter().map(|v| v.as_slice()).collect();
        let lp = self.logprobs_on_tape(t, &refs, z_mod, false);
        let picked = t.pick_cols(lp, targets);
        let nll = t.scale(picked, -1.0);
        let segs = Segments::from_lengths(&inputs.iter().map(|v| v.len()).collect::<Vec<_>>()).expect("non-empty");
        t.segment_sum(nll, &segs)
    }

    /// Summed NLL of one species sequence under latent `z`.
    pub fn nll_loss(&self, store: &ParamStore, species: &[AtomType], z: &LatentVector) -> Result<f64, DecoderError> {
        if z.len() != self.d_z {
            return Err(DecoderError::LatentWidth { expected: self.d_z, got: z.len() });
        }
        self.check_species(species)?;
        let mut t = Tape::inference(store);
        let zv = t.constant(Array2::from_shape_vec((1, z.len()), z.as_slice().to_vec()).expect("row"));
        let m = self.modulate_on_tape(&mut t, zv);
        let s: Vec<usize> = species.iter().map(|a| a.0).collect();
        let nll = self.nll_on_tape(&mut t, m, &[&s]);
        Ok(t.scalar(nll))
    }

    fn check_species(&self, species: &[AtomType]) -> Result<(), DecoderError> {
        if species.len() > self.vocab.n_max {
            return Err(DecoderError::MalformedPrefix(format!("{} species exceed n_max {}", species.len(), self.vocab.n_max)));
        }
        match species.iter().find(|a| !self.vocab.is_species(**a)) {
            Some(a) => Err(DecoderError::MalformedPrefix(format!("token {a} is not a species"))),
            None => Ok(()),
        }
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<(), DecoderError> {
        match prefix.first() {
            Some(&s) if s == self.vocab.start().0 => {}
            _ => return Err(DecoderError::MalformedPrefix("prefix must begin with Start".into())),
        }
        if prefix.len() > self.vocab.n_max + 1 {
            return Err(DecoderError::MalformedPrefix(format!("prefix of length {} is too long", prefix.len())));
        }
        self.check_species(&prefix[1..].iter().map(|&t| AtomType(t)).collect::<Vec<_>>())
    }

    /// Next-token log-probabilities for `prefix` under modulation `z_mod`.
    pub fn next_token_logprobs(&self, store: &ParamStore, prefix: &[usize], z_mod: &[f64]) -> Result<Vec<f64>, DecoderError> {
        self.check_prefix(prefix)?;
        Ok(self.bound(store, z_mod).next_logprobs(&[prefix.to_vec()]).remove(0))
    }

    /// Binds parameters and one modulation vector into a [`TokenModel`].
    pub fn bound<'a>(&'a self, store: &'a ParamStore, z_mod: &[f64]) -> BoundDecoder<'a> {
        BoundDecoder { decoder: self, store, z_mod: z_mod.to_vec() }
    }

    /// Completed hypotheses for latent `z`, best first.
    pub fn beam_search(&self, store: &ParamStore, z: &LatentVector, cfg: &DecoderConfig) -> Result<Vec<Hypothesis>, DecoderError> {
        let z_mod = self.modulate_latent(store, z)?;
        let spec = BeamSpec {
            width: cfg.beam_width,
            start: self.vocab.start().0,
            stop: self.vocab.stop().0,
            max_tokens: self.vocab.n_max,
        };
        Ok(beam_search(&self.bound(store, &z_mod), &spec))
    }

    /// Best non-empty species sequence; an immediate Stop falls through to
    /// the next hypothesis, then to a search with Stop barred at step one.
    pub fn decode_species(&self, store: &ParamStore, z: &LatentVector, cfg: &DecoderConfig) -> Result<Vec<AtomType>, DecoderError> {
        let hyps = self.beam_search(store, z, cfg)?;
        if let Some(h) = hyps.iter().find(|h| !h.tokens.is_empty()) {
            return Ok(h.tokens.iter().map(|&t| AtomType(t)).collect());
        }
        let z_mod = self.modulate_latent(store, z)?;
        let model = NonEmpty { inner: self.bound(store, &z_mod), stop: self.vocab.stop().0 };
        let spec = BeamSpec { width: cfg.beam_width, start: self.vocab.start().0, stop: self.vocab.stop().0, max_tokens: self.vocab.n_max };
        let h = beam_search(&model, &spec).into_iter().next().expect("a completion exists");
        Ok(h.tokens.iter().map(|&t| AtomType(t)).collect())
    }
}

/// Decoder with fixed parameters and latent.
pub struct BoundDecoder<'a> {
    decoder: &'a AtomDecoder,
    store: &'a ParamStore,
    z_mod: Vec<f64>,
}

impl TokenModel for BoundDecoder<'_> {
    fn n_outputs(&self) -> usize {
        self.decoder.n_outputs()
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut t = Tape::inference(self.store);
        let d = self.z_mod.len();
        let cond = Array2::from_shape_fn((prefixes.len(), d), |(_, j)| self.z_mod[j]);
        let cond = t.constant(cond);
        let refs: Vec<&[usize]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let lp = self.decoder.logprobs_on_tape(&mut t, &refs, cond, true);
        t.value(lp).rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Bars Stop as the first token.
struct NonEmpty<'a> {
    inner: BoundDecoder<'a>,
    stop: usize,
}

impl TokenModel for NonEmpty<'_> {
    fn n_outputs(&self) -> usize {
        self.inner.n_outputs()
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut out = self.inner.next_logprobs(prefixes);
        for (p, lp) in prefixes.iter().zip(out.iter_mut()) {
            if p.len() == 1 {
                lp[self.stop] = f64::NEG_INFINITY;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    const D_Z: usize = 13;

    fn setup() -> (ParamStore, AtomDecoder) {
        let mut store = ParamStore::new();
        let mut rng = stream(2, "dec-init", 0);
        let vocab = Vocab::new(5, 6);
        let dec = AtomDecoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &TransformerConfig::desk(), &vocab, D_Z);
        (store, dec)
    }

    fn latent(seed: u64) -> LatentVector {
        let mut rng = stream(seed, "dec-z", 0);
        LatentVector::new((0..D_Z).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn modulation_is_normalized_and_nonlinear() {
        let (store, dec) = setup();
        let z = latent(0);
        let m = dec.modulate_latent(&store, &z).unwrap();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
        let z2 = LatentVector::new(z.as_slice().iter().map(|x| 2.0 * x).collect()).unwrap();
        assert_ne!(m, dec.modulate_latent(&store, &z2).unwrap());
        assert_eq!(m, dec.modulate_latent(&store, &z).unwrap());
    }

    #[test]
    fn distributions_are_normalized_and_causal() {
        let (store, dec) = setup();
        let zm = dec.modulate_latent(&store, &latent(1)).unwrap();
        let a = dec.next_token_logprobs(&store, &[5, 0, 3], &zm).unwrap();
        assert_eq!(a.len(), 7);
        assert!((a.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a[5], f64::NEG_INFINITY);
        // logits for the prefix [Start, 0] are computed from positions ≤ 1
        let short = dec.next_token_logprobs(&store, &[5, 0], &zm).unwrap();
        let bound = dec.bound(&store, &zm);
        let lens = [vec![5, 0, 3], vec![5, 0, 4]];
        let mut t = Tape::new(&store);
        let cond = t.constant(Array2::from_shape_fn((2, zm.len()), |(_, j)| zm[j]));
        let refs: Vec<&[usize]> = lens.iter().map(|v| v.as_slice()).collect();
        let lp = dec.logprobs_on_tape(&mut t, &refs, cond, false);
        let lp = t.value(lp);
        for j in 0..7 {
            assert!((lp[[1, j]] - short[j]).abs() < 1e-12 || lp[[1, j]] == short[j]);
            assert!((lp[[4, j]] - short[j]).abs() < 1e-12 || lp[[4, j]] == short[j]);
        }
        assert_eq!(bound.n_outputs(), 7);
    }

    #[test]
    fn malformed_prefixes_are_rejected() {
        let (store, dec) = setup();
        let zm = vec![0.0; 64];
        assert!(dec.next_token_logprobs(&store, &[0, 1], &zm).is_err());
        assert!(dec.next_token_logprobs(&store, &[5, 6], &zm).is_err());
        assert!(dec.next_token_logprobs(&store, &[5; 1].iter().copied().chain([0; 7]).collect::<Vec<_>>(), &zm).is_err());
    }

    #[test]
    fn zero_head_is_uniform_over_allowed_tokens() {
        let (mut store, dec) = setup();
        store.value_mut(dec.head.w).fill(0.0);
        let zm = dec.modulate_latent(&store, &latent(2)).unwrap();
        let lp = dec.next_token_logprobs(&store, &[5, 1], &zm).unwrap();
        for (j, l) in lp.iter().enumerate() {
            if j != 5 {
                assert!((l + 6f64.ln()).abs() < 1e-12);
            }
        }
        let seq = [AtomType(0), AtomType(4), AtomType(2)];
        let nll = dec.nll_loss(&store, &seq, &latent(2)).unwrap();
        assert!((nll - 4.0 * 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn memorizes_a_sequence() {
        let (mut store, dec) = setup();
        let z = latent(3);
        let seq = [AtomType(1), AtomType(1), AtomType(3), AtomType(4)];
        let first = dec.nll_loss(&store, &seq, &z).unwrap();
        let mut adam = Adam::new(&store, 3e-3);
        for _ in 0..200 {
            store.zero_grads();
            let mut t = Tape::new(&store);
            let zv = t.constant(Array2::from_shape_vec((1, D_Z), z.as_slice().to_vec()).unwrap());
            let m = dec.modulate_on_tape(&mut t, zv);
            let s: Vec<usize> = seq.iter().map(|a| a.0).collect();
            let nll = dec.nll_on_tape(&mut t, m, &[&s]);
            let loss = t.sum_all(nll);
            let g = t.backward(loss).unwrap();
            g.accumulate_into(&mut store);
            adam.step(&mut store);
        }
        let last = dec.nll_loss(&store, &seq, &z).unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
        assert_eq!(dec.decode_species(&store, &z, &DecoderConfig::default()).unwrap(), seq.to_vec());
    }

    #[test]
    fn packed_nll_equals_per_record_sum() {
        let (store, dec) = setup();
        let seqs: [&[usize]; 3] = [&[0, 1], &[4], &[2, 2, 3, 1, 0, 4]];
        let zs: Vec<LatentVector> = (0..3).map(|i| latent(10 + i)).collect();
        let mut t = Tape::new(&store);
        let z = Array2::from_shape_fn((3, D_Z), |(i, j)| zs[i].as_slice()[j]);
        let zv = t.constant(z);
        let m = dec.modulate_on_tape(&mut t, zv);
        let nll = dec.nll_on_tape(&mut t, m, &seqs);
        for (i, s) in seqs.iter().enumerate() {
            let single = dec.nll_loss(&store, &s.iter().map(|&x| AtomType(x)).collect::<Vec<_>>(), &zs[i]).unwrap();
            assert!((t.value(nll)[[i, 0]] - single).abs() < 1e-10);
        }
    }
}
