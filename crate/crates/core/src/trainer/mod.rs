//! Joint training of encoder, predictor, species decoder and geometry flow.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION};

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::MaterialBatch;
use crate::crystal::{Material, MaterialRecord};
use crate::encoder::sample_on_tape;
use crate::flow::{draw_flow_sample, FlowConfig, FlowInputs, FlowSample};
use crate::model::Model;
use crate::nn::{Adam, Gradients, Tape, Var};
use crate::rng::{stream, Rng as StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gradient_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: u64,
    /// KL weight limit.
    pub alpha_vae: f64,
    /// Prediction weight limit.
    pub alpha_mse: f64,
    /// Prediction weight at the start of its ramp.
    pub beta_mse: f64,
    pub temp_atom: f64,
    /// Validation loss is evaluated every this many steps.
    pub eval_every: u64,
    /// Validation records scored per evaluation.
    pub eval_records: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            gradient_steps: 700_000,
            batch_size: 1024,
            learning_rate: 1.4e-4,
            warmup: 100_000,
            alpha_vae: 1e-4,
            alpha_mse: 1.0,
            beta_mse: 1e-4,
            temp_atom: 1.0,
            eval_every: 1000,
            eval_records: 1000,
        }
    }

    pub fn desk() -> Self {
        TrainConfig { gradient_steps: 20_000, batch_size: 64, warmup: 2_000, eval_every: 500, eval_records: 200, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = self.gradient_steps > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.warmup > 0
            && self.alpha_vae > 0.0
            && self.alpha_mse > 0.0
            && self.beta_mse > 0.0
            && self.temp_atom > 0.0
            && self.eval_every > 0;
        if !positive {
            return Err("training settings must all be positive".into());
        }
        if self.warmup > self.gradient_steps {
            return Err(format!("warmup {} exceeds gradient_steps {}", self.warmup, self.gradient_steps));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// KL weight `β` and prediction weight `τ_pred` at `step`: `β` ramps first,
/// over `[0, warmup]`, then `τ_pred` over `[warmup, 2·warmup]`.
pub fn warmup_schedules(step: u64, cfg: &TrainConfig) -> (f64, f64) {
    let w = cfg.warmup as f64;
    let s = step as f64;
    let beta = cfg.alpha_vae * (s / w).min(1.0);
    let ramp = ((s - w) / w).clamp(0.0, 1.0);
    let tau = cfg.beta_mse + (cfg.alpha_mse - cfg.beta_mse) * ramp;
    (beta, tau)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub temp_atom: f64,
    pub beta: f64,
    pub tau_pred: f64,
}

impl LossWeights {
    pub fn at_step(step: u64, cfg: &TrainConfig) -> Self {
        let (beta, tau_pred) = warmup_schedules(step, cfg);
        LossWeights { temp_atom: cfg.temp_atom, beta, tau_pred }
    }
}

/// Batch means of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub atom: f64,
    pub flow: f64,
    pub pred: f64,
    pub kl: f64,
}

/// Random draws for one record, taken from that record's own generator.
struct RecordDraws {
    eps: Vec<f64>,
    clique: usize,
    flow: FlowSample,
}

fn draw_record<R: Rng>(m: &Material, model: &Model, flow_cfg: &FlowConfig, rng: &mut R) -> RecordDraws {
    let d_z = model.d_z();
    let eps = (0..d_z).map(|_| StandardNormal.sample(rng)).collect();
    let clique = rng.random_range(0..model.shape().n_cliques());
    let flow = draw_flow_sample(m, d_z, flow_cfg, &model.prior, rng);
    RecordDraws { eps, clique, flow }
}

fn row_sums(t: &mut Tape<'_>, x: Var) -> Var {
    let ones = t.constant(Array2::ones((t.value(x).ncols(), 1)));
    t.matmul(x, ones)
}

fn squared_error_rows(t: &mut Tape<'_>, pred: Var, target: Array2<f64>) -> Var {
    let target = t.constant(target);
    let d = t.sub(pred, target);
    let sq = t.square(d);
    row_sums(t, sq)
}

/// Records the total loss for `batch` on `t`; `rngs` holds one generator
/// per record so results do not depend on how records are grouped.
pub fn loss_on_tape<R: Rng>(
    t: &mut Tape<'_>,
    model: &Model,
    batch: &[&MaterialRecord],
    flow_cfg: &FlowConfig,
    w: &LossWeights,
    rngs: &mut [R],
) -> (Var, LossBreakdown) {
    assert_eq!(batch.len(), rngs.len(), "one generator per record");
    let b = batch.len();
    let d_z = model.d_z();
    let shape = model.shape();
    let materials: Vec<&Material> = batch.iter().map(|r| &r.material).collect();
    let draws: Vec<RecordDraws> = materials.iter().zip(rngs.iter_mut()).map(|(m, r)| draw_record(m, model, flow_cfg, r)).collect();
    let mb = MaterialBatch::new(&materials);

    let enc = model.encoder.forward(t, &mb);
    let eps = Array2::from_shape_fn((b, d_z), |(i, j)| draws[i].eps[j]);
    let z = sample_on_tape(t, enc, eps);

    // species reconstruction
    let z_mod = model.decoder.modulate_on_tape(t, z);
    let species: Vec<Vec<usize>> = materials.iter().map(|m| m.species().iter().map(|a| a.0).collect()).collect();
    let refs: Vec<&[usize]> = species.iter().map(|s| s.as_slice()).collect();
    let atom = model.decoder.nll_on_tape(t, z_mod, &refs);

    // geometry flow, with masked latents swapped for noise
    let masked: Vec<usize> = (0..b).filter(|&i| draws[i].flow.masked.is_some()).collect();
    let z_flow = if masked.is_empty() {
        z
    } else {
        let noise = Array2::from_shape_fn((masked.len(), d_z), |(k, j)| draws[masked[k]].flow.masked.as_ref().expect("masked")[j]);
        let noise = t.constant(noise);
        let stacked = t.concat_rows(&[z, noise]);
        let mut idx: Vec<usize> = (0..b).collect();
        for (k, &i) in masked.iter().enumerate() {
            idx[i] = b + k;
        }
        t.gather(stacked, idx.into())
    };
    let inputs = FlowInputs::from_states(
        draws.iter().zip(&species).map(|(d, s)| (&d.flow.g_t, d.flow.t, s.as_slice())),
    );
    let v = model.flow.forward(t, &inputs, z_flow);
    let tl = Array2::from_shape_fn((b, 3), |(i, k)| draws[i].flow.target.lengths[k]);
    let ta = Array2::from_shape_fn((b, 3), |(i, k)| draws[i].flow.target.angles[k]);
    let tp_rows: Vec<f64> = draws.iter().flat_map(|d| d.flow.target.positions.iter().flatten().copied()).collect();
    let tp = Array2::from_shape_vec((tp_rows.len() / 3, 3), tp_rows).expect("3 per atom");
    let l_len = squared_error_rows(t, v.lengths, tl);
    let l_ang = squared_error_rows(t, v.angles, ta);
    let l_pos_atoms = squared_error_rows(t, v.positions, tp);
    let l_pos = t.segment_sum(l_pos_atoms, &mb.atom_segs);
    let l_pos = t.scale(l_pos, flow_cfg.tau_pos);
    let flow = t.add(l_len, l_ang);
    let flow = t.add(flow, l_pos);

    // property prediction
    let f = model.predictor.forward(t, z);
    let y = Array2::from_shape_fn((b, 1), |(i, _)| batch[i].property);
    let pred = squared_error_rows(t, f, y);

    // KL of one clique per record
    let mask = Array2::from_shape_fn((b, d_z), |(i, j)| if shape.clique_range(draws[i].clique).contains(&j) { 1.0 } else { 0.0 });
    let two_ls = t.scale(enc.log_sigma, 2.0);
    let var = t.exp(two_ls);
    let mu2 = t.square(enc.mu);
    let kl = t.add(var, mu2);
    let kl = t.sub(kl, two_ls);
    let kl = t.add_const(kl, -1.0);
    let mask = t.constant(mask);
    let kl = t.mul(kl, mask);
    let kl = row_sums(t, kl);
    let kl = t.scale(kl, 0.5);

    let mut total = t.scale(atom, w.temp_atom);
    total = t.add(total, flow);
    let wp = t.scale(pred, w.tau_pred);
    total = t.add(total, wp);
    let wk = t.scale(kl, w.beta);
    total = t.add(total, wk);
    let loss = t.mean_all(total);

    let mean = |t: &Tape<'_>, v: Var| t.value(v).sum() / b as f64;
    let parts = LossBreakdown {
        total: t.scalar(loss),
        atom: mean(t, atom),
        flow: mean(t, flow),
        pred: mean(t, pred),
        kl: mean(t, kl),
    };
    (loss, parts)
}

/// Evaluation-mode total loss (no dropout).
pub fn total_loss<R: Rng>(
    model: &Model,
    batch: &[&MaterialRecord],
    flow_cfg: &FlowConfig,
    w: &LossWeights,
    rngs: &mut [R],
) -> LossBreakdown {
    let mut t = Tape::inference(&model.params);
    loss_on_tape(&mut t, model, batch, flow_cfg, w, rngs).1
}

/// Evaluation-mode total loss and its exact gradients.
pub fn total_loss_and_grads<R: Rng>(
    model: &Model,
    batch: &[&MaterialRecord],
    flow_cfg: &FlowConfig,
    w: &LossWeights,
    rngs: &mut [R],
) -> (LossBreakdown, Gradients) {
    let mut t = Tape::new(&model.params);
    let (loss, parts) = loss_on_tape(&mut t, model, batch, flow_cfg, w, rngs);
    (parts, t.backward(loss).expect("loss was recorded"))
}

/// Seeded 60/20/20 train/validation/test split of record indices.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "split", 0));
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub atom: f64,
    pub flow: f64,
    pub pred: f64,
    pub kl: f64,
    pub beta: f64,
    pub tau_pred: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

/// Model, optimizer and position in a seeded training run. All randomness of
/// step `s` comes from streams keyed by `(seed, s)`, so a run resumed from a
/// checkpoint continues exactly as the uninterrupted one.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub flow: FlowConfig,
    pub seed: u64,
    pub step: u64,
}

fn record_streams(seed: u64, tag: &str, base: u64, n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|i| stream(seed, tag, base + i)).collect()
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, flow: FlowConfig, seed: u64) -> Self {
        let adam = Adam::new(&model.params, config.learning_rate);
        Trainer { model, adam, config, flow, seed, step: 0 }
    }

    /// One Adam update on a batch drawn from `train`.
    pub fn train_step(&mut self, train: &[MaterialRecord]) -> LossBreakdown {
        assert!(!train.is_empty(), "empty training set");
        let s = self.step;
        let mut rng = stream(self.seed, "batch", s);
        let batch: Vec<&MaterialRecord> =
            (0..self.config.batch_size).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let mut rngs = record_streams(self.seed, "record", s << 24, batch.len());
        let w = LossWeights::at_step(s, &self.config);
        let rate = self.model.config.dropout_rate;
        let (parts, grads) = {
            let mut t = Tape::training(&self.model.params, rate, stream(self.seed, "dropout", s));
            let (loss, parts) = loss_on_tape(&mut t, &self.model, &batch, &self.flow, &w, &mut rngs);
            (parts, t.backward(loss).expect("loss was recorded"))
        };
        self.model.params.zero_grads();
        grads.accumulate_into(&mut self.model.params);
        self.adam.step(&mut self.model.params);
        self.step += 1;
        parts
    }

    /// Deterministic validation loss at the current schedule weights.
    pub fn evaluate(&self, records: &[MaterialRecord]) -> f64 {
        if records.is_empty() {
            return f64::NAN;
        }
        let w = LossWeights::at_step(self.step, &self.config);
        let n = records.len().min(self.config.eval_records.max(1));
        let chunk = 64;
        let mut sum = 0.0;
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let batch: Vec<&MaterialRecord> = records[start..end].iter().collect();
            let mut rngs = record_streams(self.seed, "eval", start as u64, batch.len());
            sum += total_loss(&self.model, &batch, &self.flow, &w, &mut rngs).total * batch.len() as f64;
        }
        sum / n as f64
    }

    /// Trains until `until` steps, calling `on_log` after every step.
    pub fn run(&mut self, train: &[MaterialRecord], val: &[MaterialRecord], until: u64, mut on_log: impl FnMut(&LogRow)) {
        let started = Instant::now();
        while self.step < until {
            let parts = self.train_step(train);
            let (beta, tau_pred) = warmup_schedules(self.step - 1, &self.config);
            let val_loss = (self.step % self.config.eval_every == 0 || self.step == until).then(|| self.evaluate(val));
            on_log(&LogRow {
                step: self.step,
                loss: parts.total,
                atom: parts.atom,
                flow: parts.flow,
                pred: parts.pred,
                kl: parts.kl,
                beta,
                tau_pred,
                val_loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{AtomType, Vocab};
    use crate::flow::{sample_prior, LengthPrior};
    use crate::model::ModelConfig;

    fn records(n: usize, seed: u64) -> Vec<MaterialRecord> {
        let vocab = Vocab::default();
        let mut rng = stream(seed, "train-recs", 0);
        (0..n)
            .map(|_| {
                let k = rng.random_range(1..=6);
                let g = sample_prior(k, &LengthPrior::default(), &mut rng);
                let sp: Vec<AtomType> = (0..k).map(|_| AtomType(rng.random_range(0..16))).collect();
                let y = sp.iter().map(|a| a.0 as f64).sum::<f64>() / (16.0 * k as f64);
                MaterialRecord::new(Material::new(sp, g, &vocab).unwrap(), y).unwrap()
            })
            .collect()
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::desk();
        assert_eq!(warmup_schedules(0, &c), (0.0, 1e-4));
        let (b, t) = warmup_schedules(c.warmup, &c);
        assert!((b - 1e-4).abs() < 1e-18 && (t - 1e-4).abs() < 1e-18);
        assert_eq!(warmup_schedules(2 * c.warmup, &c), (1e-4, 1.0));
        assert_eq!(warmup_schedules(10 * c.warmup, &c), (1e-4, 1.0));
        for s in (0..5 * c.warmup).step_by(97) {
            let (b, t) = warmup_schedules(s, &c);
            assert!(b <= c.alpha_vae && t <= c.alpha_mse);
        }
    }

    #[test]
    fn split_is_60_20_20_and_disjoint() {
        let (a, b, c) = split_indices(100, 3);
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn floor_weights_leave_atom_and_flow_terms() {
        let model = Model::new(ModelConfig::desk(), LengthPrior::default(), 0).unwrap();
        let recs = records(3, 0);
        let batch: Vec<&MaterialRecord> = recs.iter().collect();
        let w = LossWeights { temp_atom: 1.0, beta: 0.0, tau_pred: 0.0 };
        let mut rngs = record_streams(1, "r", 0, 3);
        let p = total_loss(&model, &batch, &FlowConfig::default(), &w, &mut rngs);
        assert!((p.total - (p.atom + p.flow)).abs() < 1e-10);
    }

    #[test]
    fn batched_loss_equals_mean_of_single_records() {
        let model = Model::new(ModelConfig::desk(), LengthPrior::default(), 0).unwrap();
        let recs = records(4, 1);
        let w = LossWeights { temp_atom: 1.0, beta: 0.3, tau_pred: 0.7 };
        let cfg = FlowConfig::default();
        let batch: Vec<&MaterialRecord> = recs.iter().collect();
        let all = total_loss(&model, &batch, &cfg, &w, &mut record_streams(5, "r", 0, 4));
        let mut mean = 0.0;
        for i in 0..4 {
            let one = total_loss(&model, &[&recs[i]], &cfg, &w, &mut record_streams(5, "r", i as u64, 1));
            mean += one.total / 4.0;
        }
        assert!((all.total - mean).abs() < 1e-10, "{} vs {mean}", all.total);
    }

    #[test]
    fn overfits_a_handful_of_records() {
        let mut cfg = ModelConfig::desk();
        cfg.dropout_rate = 0.0;
        let model = Model::new(cfg, LengthPrior::default(), 0).unwrap();
        let recs = records(8, 2);
        let tc = TrainConfig { batch_size: 8, learning_rate: 1e-3, warmup: 50, gradient_steps: 400, ..TrainConfig::desk() };
        let mut tr = Trainer::new(model, tc, FlowConfig::default(), 0);
        let first = tr.evaluate(&recs);
        tr.run(&recs, &recs, 400, |_| {});
        let last = tr.evaluate(&recs);
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
