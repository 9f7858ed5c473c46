//! Latent-space optimization of a property surrogate and the
//! encode → optimize → decode discovery pipeline.
//!
//! Lower surrogate values are better; gradients estimate `∇f` and steps move
//! against them.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atom_decoder::{DecoderConfig, DecoderError};
use crate::clique::{CliqueShape, LatentVector};
use crate::crystal::{AtomType, Material, MaterialRecord};
use crate::flow::{integrate, FlowConfig, FlowError, Trajectory};
use crate::model::Model;
use crate::nn::Tape;
use crate::rng::{stream, Rng as StreamRng};
use crate::toy::{oracle, OracleSpec};

#[derive(Debug, thiserror::Error)]
pub enum MboError {
    #[error("surrogate returned a non-finite value for latent {latent} at step {step}")]
    NonFinite { latent: usize, step: usize },
    #[error("no latents to optimize or filter")]
    Empty,
    #[error("invalid optimizer settings: {0}")]
    Config(String),
    #[error("surrogate has no exact gradient")]
    NoGradient,
    #[error("record {record}: {source}")]
    Decode { record: usize, source: DecoderError },
    #[error("flow: {0}")]
    Flow(#[from] FlowError),
    #[error("record {record}: decoded material is invalid: {message}")]
    Material { record: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Rank-based evolution strategies.
    Es,
    /// Exact back-propagated gradients.
    Bp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `z ← z − lr·λ·z` after each step.
    Decoupled,
    /// `z ← (1 − λ)·z` after each step.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub algorithm: GradientSource,
    pub antithetic: bool,
    pub n_pert: usize,
    pub pert_scale: f64,
    pub learning_rate: f64,
    pub design_steps: usize,
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub top_k_percent: f64,
    /// Keep only the top-k% latents by predicted value before decoding.
    pub filter: bool,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            algorithm: GradientSource::Es,
            antithetic: true,
            n_pert: 20,
            pert_scale: 0.05,
            learning_rate: 3e-4,
            design_steps: 2000,
            decay: 0.4,
            decay_mode: DecayMode::Decoupled,
            top_k_percent: 10.0,
            filter: false,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<(), MboError> {
        let bad = |m: &str| Err(MboError::Config(m.into()));
        if self.n_pert == 0 {
            return bad("n_pert must be at least 1");
        }
        if !(self.pert_scale > 0.0) {
            return bad("pert_scale must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1)");
        }
        if !(self.top_k_percent > 0.0 && self.top_k_percent <= 100.0) {
            return bad("top_k_percent must lie in (0, 100]");
        }
        Ok(())
    }
}

/// A scalar objective over latents, evaluated a batch of rows at a time.
pub trait Surrogate {
    fn dim(&self) -> usize;
    fn evaluate(&self, z: &Array2<f64>) -> Vec<f64>;
    /// Row-wise exact gradients, if the surrogate is differentiable.
    fn gradient(&self, _z: &Array2<f64>) -> Option<Array2<f64>> {
        None
    }
}

/// `scale·‖z − center‖²`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Surrogate for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, z: &Array2<f64>) -> Vec<f64> {
        z.outer_iter().map(|r| self.scale * r.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()).collect()
    }

    fn gradient(&self, z: &Array2<f64>) -> Option<Array2<f64>> {
        Some(Array2::from_shape_fn(z.dim(), |(i, j)| 2.0 * self.scale * (z[[i, j]] - self.center[j])))
    }
}

/// Any per-row function, without gradients.
pub struct FnSurrogate<F: Fn(&[f64]) -> f64> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64> Surrogate for FnSurrogate<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, z: &Array2<f64>) -> Vec<f64> {
        z.outer_iter().map(|r| (self.f)(r.as_slice().expect("standard layout"))).collect()
    }
}

/// The trained clique predictor.
pub struct ModelSurrogate<'a> {
    pub model: &'a Model,
}

impl Surrogate for ModelSurrogate<'_> {
    fn dim(&self) -> usize {
        self.model.d_z()
    }

    fn evaluate(&self, z: &Array2<f64>) -> Vec<f64> {
        // rows are scored independently, so chunking cannot change the result
        const CHUNK: usize = 2048;
        if z.nrows() <= CHUNK || rayon::current_num_threads() == 1 {
            return self.model.predictor.predict_batch(&self.model.params, z);
        }
        let starts: Vec<usize> = (0..z.nrows()).step_by(CHUNK).collect();
        starts
            .par_iter()
            .map(|&s| {
                let part = z.slice(ndarray::s![s..(s + CHUNK).min(z.nrows()), ..]).to_owned();
                self.model.predictor.predict_batch(&self.model.params, &part)
            })
            .collect::<Vec<_>>()
            .concat()
    }

    fn gradient(&self, z: &Array2<f64>) -> Option<Array2<f64>> {
        let mut t = Tape::new(&self.model.params);
        let zv = t.input(z.clone());
        let y = self.model.predictor.forward(&mut t, zv);
        // rows are independent, so the gradient of the sum is row-wise
        let s = t.sum_all(y);
        let g = t.backward(s).expect("forward pass recorded");
        Some(g.wrt(zv).cloned().unwrap_or_else(|| Array2::zeros(z.dim())))
    }
}

/// Standardized ranks: ascending order, tied values share their mean rank,
/// then zero mean and unit population variance (all zero if every value ties).
pub fn standardized_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let mean = ranks.iter().sum::<f64>() / n as f64;
    let var = ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return vec![0.0; n];
    }
    let sd = var.sqrt();
    ranks.iter().map(|r| (r - mean) / sd).collect()
}

/// Perturbation rows for one latent: `+` rows first, then `−` rows when antithetic.
fn perturbations<R: Rng + ?Sized>(z: &[f64], cfg: &EsConfig, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let eps: Vec<Vec<f64>> = (0..cfg.n_pert).map(|_| (0..z.len()).map(|_| StandardNormal.sample(rng)).collect()).collect();
    let mut rows = Vec::with_capacity(cfg.n_pert * 2);
    for sign in if cfg.antithetic { [1.0, -1.0].as_slice() } else { [1.0].as_slice() } {
        for e in &eps {
            rows.push(z.iter().zip(e).map(|(z, e)| z + sign * cfg.pert_scale * e).collect());
        }
    }
    (eps, rows)
}

fn es_combine(values: &[f64], eps: &[Vec<f64>], cfg: &EsConfig) -> Vec<f64> {
    let r = standardized_ranks(values);
    let n = cfg.n_pert;
    let d = eps[0].len();
    let mut g = vec![0.0; d];
    if cfg.antithetic {
        let c = 1.0 / (2.0 * cfg.pert_scale * n as f64);
        for i in 0..n {
            let w = c * (r[i] - r[n + i]);
            g.iter_mut().zip(&eps[i]).for_each(|(g, e)| *g += w * e);
        }
    } else {
        let c = 1.0 / (cfg.pert_scale * n as f64);
        for i in 0..n {
            g.iter_mut().zip(&eps[i]).for_each(|(g, e)| *g += c * r[i] * e);
        }
    }
    g
}

fn rows_to_matrix(rows: &[Vec<f64>], d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Rank-based ES estimate of `∇f(z)`.
pub fn es_gradient<S: Surrogate + ?Sized, R: Rng + ?Sized>(
    z: &[f64],
    f: &S,
    cfg: &EsConfig,
    rng: &mut R,
) -> Result<Vec<f64>, MboError> {
    cfg.validate()?;
    let (eps, rows) = perturbations(z, cfg, rng);
    let values = f.evaluate(&rows_to_matrix(&rows, z.len()));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MboError::NonFinite { latent: 0, step: 0 });
    }
    Ok(es_combine(&values, &eps, cfg))
}

/// Exact gradient of `f` at `z`.
pub fn bp_gradient<S: Surrogate + ?Sized>(z: &[f64], f: &S) -> Result<Vec<f64>, MboError> {
    let g = f.gradient(&rows_to_matrix(&[z.to_vec()], z.len())).ok_or(MboError::NoGradient)?;
    Ok(g.row(0).to_vec())
}

/// Adam moments for one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(d: usize) -> Self {
        AdamState { m: vec![0.0; d], v: vec![0.0; d], step: 0 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One descent step followed by weight decay.
pub fn adamw_step(z: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &EsConfig) {
    state.step += 1;
    let t = state.step as f64;
    let (bc1, bc2) = (1.0 - BETA1.powf(t), 1.0 - BETA2.powf(t));
    for j in 0..z.len() {
        let g = grad[j];
        state.m[j] = BETA1 * state.m[j] + (1.0 - BETA1) * g;
        state.v[j] = BETA2 * state.v[j] + (1.0 - BETA2) * g * g;
        z[j] -= cfg.learning_rate * (state.m[j] / bc1) / ((state.v[j] / bc2).sqrt() + ADAM_EPS);
    }
    let shrink = match cfg.decay_mode {
        DecayMode::Decoupled => 1.0 - cfg.learning_rate * cfg.decay,
        DecayMode::Literal => 1.0 - cfg.decay,
    };
    if cfg.decay != 0.0 {
        z.iter_mut().for_each(|x| *x *= shrink);
    }
}

#[derive(Clone, Debug)]
pub struct Optimized {
    /// Final latents, one row each.
    pub latents: Array2<f64>,
    /// Surrogate value per latent per step, initial value first.
    pub trace: Vec<Vec<f64>>,
    /// Latent norm per latent per step, aligned with `trace`.
    pub norms: Vec<Vec<f64>>,
}

impl Optimized {
    pub fn final_values(&self) -> Vec<f64> {
        self.trace.iter().map(|t| *t.last().expect("trace holds the initial value")).collect()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Optimizes every row of `start` independently. Latent `i` draws its
/// perturbations from its own stream, so rows do not influence each other.
pub fn optimize<S: Surrogate + ?Sized>(start: &Array2<f64>, f: &S, cfg: &EsConfig, seed: u64) -> Result<Optimized, MboError> {
    cfg.validate()?;
    let (n, d) = start.dim();
    if n == 0 {
        return Err(MboError::Empty);
    }
    let mut z: Vec<Vec<f64>> = start.outer_iter().map(|r| r.to_vec()).collect();
    let mut states = vec![AdamState::new(d); n];
    let mut rngs: Vec<StreamRng> = (0..n as u64).map(|i| stream(seed, "latent-es", i)).collect();
    let mut trace = vec![Vec::with_capacity(cfg.design_steps + 1); n];
    let mut norms = vec![Vec::with_capacity(cfg.design_steps + 1); n];
    let rows_per = 1 + match cfg.algorithm {
        GradientSource::Es => cfg.n_pert * if cfg.antithetic { 2 } else { 1 },
        GradientSource::Bp => 0,
    };
    for step in 0..=cfg.design_steps {
        let last = step == cfg.design_steps;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n * rows_per);
        let mut eps = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(z[i].clone());
            if !last && cfg.algorithm == GradientSource::Es {
                let (e, r) = perturbations(&z[i], cfg, &mut rngs[i]);
                rows.extend(r);
                eps.push(e);
            }
        }
        let values = f.evaluate(&rows_to_matrix(&rows, d));
        let per = if last || cfg.algorithm == GradientSource::Bp { 1 } else { rows_per };
        for i in 0..n {
            let chunk = &values[i * per..(i + 1) * per];
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(MboError::NonFinite { latent: i, step });
            }
            trace[i].push(chunk[0]);
            norms[i].push(norm(&z[i]));
        }
        if last {
            break;
        }
        let grads: Vec<Vec<f64>> = match cfg.algorithm {
            GradientSource::Es => (0..n).map(|i| es_combine(&values[i * per + 1..(i + 1) * per], &eps[i], cfg)).collect(),
            GradientSource::Bp => {
                let g = f.gradient(&rows_to_matrix(&z, d)).ok_or(MboError::NoGradient)?;
                g.outer_iter().map(|r| r.to_vec()).collect()
            }
        };
        for i in 0..n {
            if grads[i].iter().any(|g| !g.is_finite()) {
                return Err(MboError::NonFinite { latent: i, step });
            }
            adamw_step(&mut z[i], &grads[i], &mut states[i], cfg);
        }
    }
    Ok(Optimized { latents: rows_to_matrix(&z, d), trace, norms })
}

/// Indices of the `⌈k·N/100⌉` lowest values, in their original order.
/// Equal values keep the earlier index.
pub fn top_k_filter(values: &[f64], k_percent: f64) -> Result<Vec<usize>, MboError> {
    if values.is_empty() {
        return Err(MboError::Empty);
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(MboError::Config("top_k_percent must lie in (0, 100]".into()));
    }
    let n = values.len();
    // the small slack keeps k·N/100 that is integral in exact arithmetic from rounding up
    let keep = ((k_percent * n as f64 / 100.0) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// `(1 − t)·z0 + t·z1`.
pub fn interpolate_latent(z0: &[f64], z1: &[f64], t: f64) -> Vec<f64> {
    z0.iter().zip(z1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Like [`interpolate_latent`] on the coordinates of clique `c` only. Shared
/// knot coordinates move too, which also touches the neighboring cliques.
pub fn interpolate_clique(z0: &[f64], z1: &[f64], shape: &CliqueShape, c: usize, t: f64) -> Vec<f64> {
    let mut out = z0.to_vec();
    for j in shape.clique_range(c) {
        out[j] = (1.0 - t) * z0[j] + t * z1[j];
    }
    out
}

/// Decoding settings for [`discover`].
#[derive(Clone, Debug)]
pub struct DiscoverConfig {
    pub es: EsConfig,
    pub decoder: DecoderConfig,
    pub flow: FlowConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Discovery {
    /// Index of the source record for each output.
    pub source: Vec<usize>,
    pub materials: Vec<Material>,
    /// Surrogate value of each kept latent.
    pub predicted: Vec<f64>,
    /// Oracle value of each decoded material, when an oracle was given.
    pub oracle_values: Option<Vec<f64>>,
    pub optimized: Optimized,
}

/// Encodes records to their posterior means.
pub fn encode_means(model: &Model, records: &[MaterialRecord]) -> Array2<f64> {
    let d = model.d_z();
    let mut out = Array2::zeros((records.len(), d));
    for (start, chunk) in (0..records.len()).step_by(64).zip(records.chunks(64)) {
        let ms: Vec<&Material> = chunk.iter().map(|r| &r.material).collect();
        for (k, e) in model.encoder.encode_batch(&model.params, &ms).into_iter().enumerate() {
            out.row_mut(start + k).assign(&ndarray::ArrayView1::from(e.mu.as_slice()));
        }
    }
    out
}

/// Decodes species for each latent row; `source` names the record behind
/// each row for error messages.
pub fn decode_species_rows(model: &Model, z: &Array2<f64>, cfg: &DecoderConfig, source: &[usize]) -> Result<Vec<Vec<AtomType>>, MboError> {
    let rows: Vec<Vec<f64>> = z.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    rows.into_par_iter()
        .zip(source.par_iter())
        .map(|(row, &record)| {
            let lat = LatentVector::new(row).map_err(|e| MboError::Config(e.to_string()))?;
            model.decoder.decode_species(&model.params, &lat, cfg).map_err(|source| MboError::Decode { record, source })
        })
        .collect()
}

/// Encode, optimize, optionally filter, then decode species and geometry.
pub fn discover(model: &Model, records: &[MaterialRecord], cfg: &DiscoverConfig, spec: Option<&OracleSpec>) -> Result<Discovery, MboError> {
    if records.is_empty() {
        return Err(MboError::Empty);
    }
    let start = encode_means(model, records);
    let surrogate = ModelSurrogate { model };
    let optimized = optimize(&start, &surrogate, &cfg.es, cfg.seed)?;
    let finals = optimized.final_values();
    let source: Vec<usize> = if cfg.es.filter { top_k_filter(&finals, cfg.es.top_k_percent)? } else { (0..records.len()).collect() };
    let kept = optimized.latents.select(Axis(0), &source);
    let species = decode_species_rows(model, &kept, &cfg.decoder, &source)?;
    let latents: Vec<Vec<f64>> = kept.outer_iter().map(|r| r.to_vec()).collect();
    let trajs: Vec<Trajectory<'_>> = latents.iter().zip(&species).map(|(z, s)| Trajectory { latent: z, species: s }).collect();
    let mut rngs: Vec<StreamRng> = source.iter().map(|&i| stream(cfg.seed, "discover-flow", i as u64)).collect();
    let field = model.flow.bound(&model.params);
    let geoms = integrate(&field, &trajs, &cfg.flow, &model.prior, &mut rngs)?;
    let vocab = model.vocab();
    let materials = species
        .into_iter()
        .zip(geoms)
        .zip(&source)
        .map(|((s, g), &record)| Material::new(s, g, &vocab).map_err(|e| MboError::Material { record, message: e.to_string() }))
        .collect::<Result<Vec<_>, _>>()?;
    let oracle_values = spec.map(|spec| materials.iter().map(|m| oracle(m, spec)).collect());
    Ok(Discovery { predicted: source.iter().map(|&i| finals[i]).collect(), source, materials, oracle_values, optimized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_x() -> FnSurrogate<impl Fn(&[f64]) -> f64> {
        FnSurrogate { dim: 1, f: |z: &[f64]| z[0] }
    }

    #[test]
    fn hand_computed_single_pair() {
        let cfg = EsConfig { n_pert: 1, pert_scale: 0.1, ..EsConfig::default() };
        let values = [0.1, -0.1];
        assert_eq!(standardized_ranks(&values), vec![1.0, -1.0]);
        assert_eq!(es_combine(&values, &[vec![1.0]], &cfg), vec![10.0]);
        // through the surrogate the drawn ε enters as 10·|ε|
        let e: f64 = StandardNormal.sample(&mut stream(0, "t", 0));
        let g = es_gradient(&[0.0], &scalar_x(), &cfg, &mut stream(0, "t", 0)).unwrap();
        assert!((g[0] - 10.0 * e.abs()).abs() < 1e-12);
    }

    #[test]
    fn constant_surrogate_gives_zero_gradient() {
        let f = FnSurrogate { dim: 5, f: |_: &[f64]| 3.0 };
        let g = es_gradient(&[0.1; 5], &f, &EsConfig::default(), &mut stream(1, "t", 0)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn monotone_transform_is_invisible() {
        let q = Quadratic { center: vec![0.3; 8], scale: 1.0 };
        let qe = FnSurrogate {
            dim: 8,
            f: |z: &[f64]| {
                let v = q.evaluate(&rows_to_matrix(&[z.to_vec()], 8))[0];
                2.0 * v.powi(3) + v - 7.0
            },
        };
        let cfg = EsConfig::default();
        let a = es_gradient(&[0.0; 8], &q, &cfg, &mut stream(2, "t", 0)).unwrap();
        let b = es_gradient(&[0.0; 8], &qe, &cfg, &mut stream(2, "t", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_surrogate_with_antithetic_pairs_cancels() {
        let f = FnSurrogate { dim: 4, f: |z: &[f64]| z.iter().map(|x| x * x).sum::<f64>() };
        let g = es_gradient(&[0.0; 4], &f, &EsConfig::default(), &mut stream(3, "t", 0)).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let f = FnSurrogate { dim: 2, f: |z: &[f64]| if z[0] > 0.0 { f64::NAN } else { 0.0 } };
        assert!(matches!(es_gradient(&[0.0; 2], &f, &EsConfig::default(), &mut stream(4, "t", 0)), Err(MboError::NonFinite { .. })));
        let start = Array2::zeros((3, 2));
        assert!(matches!(optimize(&start, &f, &EsConfig::default(), 0), Err(MboError::NonFinite { step: 0, .. })));
    }

    #[test]
    fn bp_matches_quadratic_and_finite_differences() {
        let q = Quadratic { center: vec![0.5, -1.0, 2.0], scale: 1.0 };
        let z = [0.1, 0.2, 0.3];
        let g = bp_gradient(&z, &q).unwrap();
        for j in 0..3 {
            assert!((g[j] - 2.0 * (z[j] - q.center[j])).abs() < 1e-15);
        }
        assert!(matches!(bp_gradient(&z, &scalar_x()), Err(MboError::NoGradient)));
    }

    #[test]
    fn decay_examples() {
        let cfg = EsConfig { decay: 0.0, ..EsConfig::default() };
        let mut z = vec![1.0, -2.0];
        adamw_step(&mut z, &[0.0, 0.0], &mut AdamState::new(2), &cfg);
        assert_eq!(z, vec![1.0, -2.0]);

        let cfg = EsConfig::default();
        let mut z = vec![1.0, -2.0];
        adamw_step(&mut z, &[0.0, 0.0], &mut AdamState::new(2), &cfg);
        let f = 1.0 - 1.2e-4;
        assert!((z[0] - f).abs() < 1e-15 && (z[1] + 2.0 * f).abs() < 1e-15);

        let lit = EsConfig { decay_mode: DecayMode::Literal, ..EsConfig::default() };
        let mut z = vec![1.0];
        adamw_step(&mut z, &[0.0], &mut AdamState::new(1), &lit);
        assert!((z[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn optimize_contract() {
        let q = Quadratic { center: vec![0.2; 6], scale: 1.0 };
        let start = Array2::from_shape_fn((4, 6), |(i, j)| (i + j) as f64 * 0.01);
        let zero = optimize(&start, &q, &EsConfig { design_steps: 0, ..EsConfig::default() }, 0).unwrap();
        assert_eq!(zero.latents, start);
        assert!(zero.trace.iter().all(|t| t.len() == 1));
        let cfg = EsConfig { design_steps: 300, decay: 0.0, ..EsConfig::default() };
        let run = optimize(&start, &q, &cfg, 0).unwrap();
        assert!(run.trace.iter().all(|t| t.len() == 301));
        let before: f64 = run.trace.iter().map(|t| t[0]).sum();
        let after: f64 = run.final_values().iter().sum();
        assert!(after < before);
        // rows evolve independently of their batch mates
        let solo = optimize(&start.slice(ndarray::s![0..1, ..]).to_owned(), &q, &cfg, 0).unwrap();
        assert_eq!(solo.latents.row(0), run.latents.row(0));
    }

    #[test]
    fn es_trajectory_ignores_surrogate_scale_but_bp_does_not() {
        let a = Quadratic { center: vec![0.2; 4], scale: 1.0 };
        let b = Quadratic { center: vec![0.2; 4], scale: 1000.0 };
        let start = Array2::zeros((2, 4));
        let cfg = EsConfig { design_steps: 50, ..EsConfig::default() };
        assert_eq!(optimize(&start, &a, &cfg, 1).unwrap().latents, optimize(&start, &b, &cfg, 1).unwrap().latents);
        // Adam normalizes magnitudes too, so BP is compared without it
        let za = bp_gradient(&[0.0; 4], &a).unwrap();
        let zb = bp_gradient(&[0.0; 4], &b).unwrap();
        assert_ne!(za, zb);
    }

    #[test]
    fn top_k_examples() {
        let v: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        assert_eq!(top_k_filter(&v, 100.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(top_k_filter(&v, 10.0).unwrap(), vec![0]);
        assert!(matches!(top_k_filter(&[], 10.0), Err(MboError::Empty)));
        assert_eq!(top_k_filter(&[1.0, 0.0, 0.0, 1.0], 50.0).unwrap(), vec![1, 2]);
    }

    #[test]
    fn interpolation_examples() {
        let shape = CliqueShape::new(8, 16, 1).unwrap();
        let z0: Vec<f64> = (0..121).map(|i| i as f64).collect();
        let z1: Vec<f64> = (0..121).map(|i| -(i as f64) - 1.0).collect();
        assert_eq!(interpolate_latent(&z0, &z1, 0.0), z0);
        assert_eq!(interpolate_latent(&z0, &z1, 1.0), z1);
        let mid = interpolate_latent(&z0, &z1, 0.5);
        assert!(mid.iter().zip(&z0).zip(&z1).all(|((m, a), b)| *m == (a + b) / 2.0));
        for c in 0..8 {
            let zc = interpolate_clique(&z0, &z1, &shape, c, 1.0);
            assert_eq!(zc.iter().zip(&z0).filter(|(a, b)| a != b).count(), 16);
        }
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_and_slice(values in prop::collection::vec(-5i32..5, 1..40), k in 1u32..=100) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let kept = top_k_filter(&v, k as f64).unwrap();
            let n = v.len();
            let want = ((k as usize * n) + 99) / 100;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (values[i], i));
            let mut expect = order[..want.max(1)].to_vec();
            expect.sort();
            prop_assert_eq!(kept, expect);
        }

        #[test]
        fn decay_contracts_norms(z in prop::collection::vec(-3.0f64..3.0, 1..10), lam in 0.01f64..0.99) {
            prop_assume!(z.iter().any(|&x| x != 0.0));
            let cfg = EsConfig { decay: lam, ..EsConfig::default() };
            let mut w = z.clone();
            adamw_step(&mut w, &vec![0.0; z.len()], &mut AdamState::new(z.len()), &cfg);
            prop_assert!(norm(&w) < norm(&z));
        }
    }
}
