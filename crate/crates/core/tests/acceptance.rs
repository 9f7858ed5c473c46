//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 3 7`.
//! Criteria 4, 8, 9 and 11 need trained models; set
//! `CLIQUEFLOW_ACCEPTANCE_CACHE=<dir>` to keep them between runs.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use cliqueflow::atom_decoder::{beam_search, brute_force, AtomDecoder, BeamSpec, TokenModel};
use cliqueflow::clique::{chain, flatten, CliqueChain, CliqueError, CliqueShape, LatentVector};
use cliqueflow::config::RunConfig;
use cliqueflow::crystal::{volume, AtomType, Vocab};
use cliqueflow::experiments::{self as ex, score_latents, Task};
use cliqueflow::flow::{
    integrate_from, sample_prior, sample_time, time_cdf, FlowConfig, FlowQuery, GeomState, LengthPrior, Trajectory,
    VelocityField,
};
use cliqueflow::mbo::{encode_means, es_gradient, optimize, standardized_ranks, EsConfig, FnSurrogate, Quadratic, Surrogate};
use cliqueflow::model::{Model, ModelConfig};
use cliqueflow::nn::{ParamBuilder, ParamStore, TransformerConfig};
use cliqueflow::rng::stream;
use cliqueflow::trainer::{load_checkpoint, total_loss, total_loss_and_grads, LossWeights, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

// ---- pinned budgets and tolerances -------------------------------------

const C1_LATENTS: usize = 1000;
const C1_SECONDS: f64 = 1.0;

const C2_FD_STEP: f64 = 1e-5;
const C2_COORDS_PER_TENSOR: usize = 2;
const C2_REL_FLOOR: f64 = 1e-4;
const C2_MAX_REL: f64 = 1e-3;
const C2_SECONDS: f64 = 30.0;

const C3_TRIALS: usize = 100;
const C3_MIN_POSITIVE: usize = 95;
const C3_SECONDS: f64 = 10.0;

const C4_SEEDS: u64 = 100;
const C4_MIN_CONVERGED: usize = 95;
const C4_DIM: usize = 16;
const C4_START_SCALE: f64 = 0.1;
const C4_ABLATION_LATENTS: usize = 20;
const C4_SECONDS: f64 = 120.0;

const C5_LINEAR_REL: f64 = 2e-4;

const C6_MC: usize = 10_000;
const C6_DENSITY_REL: f64 = 0.05;
const C6_KS_N: usize = 100_000;
/// Asymptotic Kolmogorov critical value at the 1% level.
const C6_KS_COEF: f64 = 1.6276;

const C7_MODELS: u64 = 100;
const C7_NETWORKS: u64 = 10;
const C7_SECONDS: f64 = 10.0;

const TRAIN_STEPS: u64 = 2500;
const TRAIN_LR: f64 = 1e-3;
const TRAIN_BATCH: usize = 64;
const TRAIN_TEMP_ATOM: f64 = 30.0;
const TRAIN_SECONDS: f64 = 20.0 * 60.0;
// Latent step size and horizon for the trained desk model, chosen on
// validation records: the default 3e-4 moves each coordinate by at most
// about 0.6, which leaves every decoded composition unchanged.
const ES_LR: f64 = 1e-2;
const ES_STEPS: usize = 500;

const C8_RECORDS: usize = 100;
const C8_MIN_RATIO: f64 = 0.60;
const C8_TREND_SLACK: f64 = 0.05;
const C8_FLOW_STEPS: usize = 100;

const C9_RECORDS: usize = 100;
const C9_MIN_IMPROVEMENT: f64 = 0.30;
const C9_FILTER_SLACK: f64 = 1e-6;
const C9_SECONDS: f64 = 600.0;

const C10_DESIGN_STEPS: usize = 50;
const C10_FLOW_STEPS: usize = 10;
const C10_MAX_MBO_SPREAD: f64 = 0.50;
const C10_MIN_DECODE_GROWTH: f64 = 5.0;

const C11_SEEDS: u64 = 5;
const C11_LATENTS: usize = 20;

// ---- shared trained models ---------------------------------------------

struct Trained {
    cfg: RunConfig,
    task: Task,
    model: Model,
    seconds: f64,
}

fn run_config(shape: CliqueShape) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::desk().with_shape(shape);
    cfg.training = TrainConfig {
        gradient_steps: TRAIN_STEPS,
        learning_rate: TRAIN_LR,
        batch_size: TRAIN_BATCH,
        warmup: TRAIN_STEPS / 4,
        temp_atom: TRAIN_TEMP_ATOM,
        eval_every: TRAIN_STEPS,
        ..TrainConfig::desk()
    };
    cfg.es = EsConfig { learning_rate: ES_LR, design_steps: ES_STEPS, ..EsConfig::default() };
    cfg
}

/// Trains on a single thread, or loads a cached checkpoint with identical
/// settings together with its recorded training time.
fn train(tag: &str, shape: CliqueShape) -> Trained {
    let mut cfg = run_config(shape);
    let task = Task::prepare(&cfg).expect("toy task");
    let cache = std::env::var_os("CLIQUEFLOW_ACCEPTANCE_CACHE").map(PathBuf::from);
    let scratch = tempfile::tempdir().expect("scratch dir");
    let dir = cache.clone().unwrap_or_else(|| scratch.path().to_path_buf());
    std::fs::create_dir_all(&dir).expect("cache dir");
    cfg.paths.out_dir = dir.join(format!("{tag}-out"));
    cfg.paths.checkpoint = Some(dir.join(format!("{tag}.ckpt")));
    let secs_path = dir.join(format!("{tag}.seconds"));
    if cache.is_some() {
        if let (Ok(t), Ok(s)) = (load_checkpoint(cfg.paths.checkpoint.as_ref().unwrap()), std::fs::read_to_string(&secs_path)) {
            if t.model.config == cfg.model && t.config == cfg.training && t.step == TRAIN_STEPS && t.seed == cfg.seed {
                let seconds = s.trim().parse().expect("recorded seconds");
                return Trained { cfg, task, model: t.model, seconds };
            }
        }
    }
    let t0 = Instant::now();
    let trainer = ex::train(&cfg, &task, |_| {}).expect("training");
    let seconds = t0.elapsed().as_secs_f64();
    std::fs::write(&secs_path, format!("{seconds}\n")).expect("record seconds");
    Trained { cfg, task, model: trainer.model, seconds }
}

fn clique_model() -> &'static Trained {
    static M: OnceLock<Trained> = OnceLock::new();
    M.get_or_init(|| train("clique", CliqueShape::default()))
}

fn flat_model() -> &'static Trained {
    static M: OnceLock<Trained> = OnceLock::new();
    M.get_or_init(|| train("flat", CliqueShape::flat(CliqueShape::default().d_z())))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- 1 ------------------------------------------------------------------

fn c1_chain_round_trip() -> Outcome {
    let t0 = Instant::now();
    let shape = CliqueShape::default();
    let mut rng = stream(1, "acceptance", 0);
    let (mut exact, mut caught) = (0, 0);
    for _ in 0..C1_LATENTS {
        let z = LatentVector::new((0..shape.d_z()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
        let zc = chain(&z, &shape).unwrap();
        if flatten(&zc, &shape).unwrap().as_slice() == z.as_slice() {
            exact += 1;
        }
        let mut rows = zc.rows().clone();
        let c = rng.random_range(0..shape.n_cliques() - 1);
        let side = rng.random_range(0..2);
        rows[[c + side, if side == 0 { shape.stride() } else { 0 }]] += 1e-6;
        if matches!(flatten(&CliqueChain::from_rows(rows), &shape), Err(CliqueError::KnotMismatch { clique, .. }) if clique == c) {
            caught += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        shape.d_z() == 121 && exact == C1_LATENTS && caught == C1_LATENTS && secs < C1_SECONDS,
        format!("d_z={}, {exact}/{C1_LATENTS} bit-exact, {caught}/{C1_LATENTS} corrupt knots caught, {secs:.2}s", shape.d_z()),
    )
}

// ---- 2 ------------------------------------------------------------------

fn c2_loss_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.toy.n_records = 20;
    let task = Task::prepare(&cfg).unwrap();
    let mut model = Model::new(ModelConfig::desk(), LengthPrior::default(), 2).unwrap();
    let batch: Vec<_> = task.records.iter().take(2).collect();
    let w = LossWeights { temp_atom: 1.0, beta: 1.0, tau_pred: 1.0 };
    let rngs = || vec![stream(2, "fd", 0), stream(2, "fd", 1)];
    let (_, grads) = total_loss_and_grads(&model, &batch, &cfg.flow, &w, &mut rngs());
    let ids: Vec<_> = model.params.ids().collect();
    let mut pick = stream(2, "fd-pick", 0);
    let (mut worst, mut checked) = (0.0f64, 0);
    for id in ids {
        let (r, c) = model.params.value(id).dim();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros((r, c)));
        for _ in 0..C2_COORDS_PER_TENSOR {
            let idx = (pick.random_range(0..r), pick.random_range(0..c));
            let orig = model.params.value(id)[idx];
            model.params.value_mut(id)[idx] = orig + C2_FD_STEP;
            let up = total_loss(&model, &batch, &cfg.flow, &w, &mut rngs()).total;
            model.params.value_mut(id)[idx] = orig - C2_FD_STEP;
            let down = total_loss(&model, &batch, &cfg.flow, &w, &mut rngs()).total;
            model.params.value_mut(id)[idx] = orig;
            let fd = (up - down) / (2.0 * C2_FD_STEP);
            let a = analytic[idx];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(C2_REL_FLOOR));
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < C2_MAX_REL && secs < C2_SECONDS,
        format!("{checked} coordinates, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

// ---- 3 ------------------------------------------------------------------

fn c3_es_estimator() -> Outcome {
    let t0 = Instant::now();
    // (a) one antithetic pair on a linear surrogate, by hand
    let d = 5;
    let coef: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.5).collect();
    let lin = FnSurrogate { dim: d, f: |z: &[f64]| z.iter().zip(&coef).map(|(a, b)| a * b).sum() };
    let cfg1 = EsConfig { n_pert: 1, pert_scale: 0.05, ..EsConfig::default() };
    let z0 = vec![0.2; d];
    let mut draw = stream(3, "es-hand", 0);
    let eps: Vec<f64> = (0..d).map(|_| draw.sample(StandardNormal)).collect();
    let at = |s: f64| -> f64 { z0.iter().zip(&eps).zip(&coef).map(|((z, e), c)| (z + s * cfg1.pert_scale * e) * c).sum() };
    let r = standardized_ranks(&[at(1.0), at(-1.0)]);
    let w = 1.0 / (2.0 * cfg1.pert_scale * 1.0) * (r[0] - r[1]);
    let expected: Vec<f64> = eps.iter().map(|e| w * e).collect();
    let got = es_gradient(&z0, &lin, &cfg1, &mut stream(3, "es-hand", 0)).unwrap();
    let hand = got == expected;

    // (b) strictly increasing transform
    let dim = 121;
    let cfg = EsConfig::default();
    let mut invariant = true;
    for s in 0..20 {
        let mut rng = stream(3, "es-mono", s);
        let q = Quadratic { center: (0..dim).map(|_| rng.sample(StandardNormal)).collect(), scale: 1.0 };
        let qt = FnSurrogate {
            dim,
            f: |z: &[f64]| {
                let v = q.evaluate(&Array2::from_shape_vec((1, dim), z.to_vec()).unwrap())[0];
                (0.01 * v).exp() + v.powi(3)
            },
        };
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let a = es_gradient(&z, &q, &cfg, &mut stream(3, "es-mono-draw", s)).unwrap();
        let b = es_gradient(&z, &qt, &cfg, &mut stream(3, "es-mono-draw", s)).unwrap();
        invariant &= a == b;
    }

    // (c) alignment with the true gradient
    let mut positive = 0;
    for s in 0..C3_TRIALS as u64 {
        let mut rng = stream(3, "es-cos", s);
        let center: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let q = Quadratic { center, scale: rng.random_range(0.1..10.0) };
        let g = es_gradient(&z, &q, &cfg, &mut rng).unwrap();
        let truth = q.gradient(&Array2::from_shape_vec((1, dim), z.clone()).unwrap()).unwrap();
        let dot: f64 = g.iter().zip(truth.iter()).map(|(a, b)| a * b).sum();
        if dot > 0.0 {
            positive += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        hand && invariant && positive >= C3_MIN_POSITIVE && secs < C3_SECONDS,
        format!("hand pair exact: {hand}, transform invariant: {invariant}, cosine > 0 in {positive}/{C3_TRIALS}, {secs:.1}s"),
    )
}

// ---- 4 ------------------------------------------------------------------

fn c4_latent_optimizer() -> Outcome {
    let model = clique_model();
    let t0 = Instant::now();
    let cfg = EsConfig { decay: 0.0, ..EsConfig::default() };
    let scale = Normal::new(0.0, C4_START_SCALE).unwrap();
    let mut converged = 0;
    let mut worst: f64 = 0.0;
    for s in 0..C4_SEEDS {
        let mut rng = stream(4, "quadratic", s);
        let center: Vec<f64> = (0..C4_DIM).map(|_| scale.sample(&mut rng)).collect();
        let start = Array2::from_shape_fn((1, C4_DIM), |_| scale.sample(&mut rng));
        let q = Quadratic { center: center.clone(), scale: 1.0 };
        let run = optimize(&start, &q, &cfg, s).unwrap();
        let dist = |z: ndarray::ArrayView1<f64>| z.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let ratio = dist(run.latents.row(0)) / dist(start.row(0));
        worst = worst.max(ratio);
        if ratio < 0.01 {
            converged += 1;
        }
    }

    let mut acfg = model.cfg.clone();
    acfg.experiments.decay_sweep = vec![];
    acfg.paths.out_dir = tempfile::tempdir().unwrap().keep();
    let rows = ex::ablate_gradients(&acfg, &model.model, model.task.eval_records(C4_ABLATION_LATENTS), &model.task.spec).unwrap();
    let change = |m: &str| rows.iter().find(|r| r.method == m).unwrap().oracle_change;
    let (bp, es, esw) = (change("BP"), change("ES"), change("ES+W"));
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        converged >= C4_MIN_CONVERGED && esw <= es && es < 0.0 && secs < C4_SECONDS,
        format!(
            "{converged}/{C4_SEEDS} reach < 1% of the initial distance (worst {worst:.2e}); oracle change ES+W {esw:+.4}, ES {es:+.4}, BP {bp:+.4}; {secs:.0}s"
        ),
    )
}

// ---- 5 ------------------------------------------------------------------

struct ConstantField(GeomState);

impl VelocityField for ConstantField {
    fn velocities(&self, q: &[FlowQuery<'_>]) -> Vec<GeomState> {
        q.iter().map(|_| self.0.clone()).collect()
    }
}

struct DecayField;

impl VelocityField for DecayField {
    fn velocities(&self, q: &[FlowQuery<'_>]) -> Vec<GeomState> {
        q.iter().map(|q| GeomState::lincomb(-1.0, q.state, 0.0, q.state)).collect()
    }
}

fn c5_flow_sampler() -> Outcome {
    let species = vec![AtomType(0), AtomType(3)];
    let latent = vec![0.0; 121];
    let noise = vec![vec![0.0; 121]];
    let tr = [Trajectory { latent: &latent, species: &species }];
    let mut rng = stream(5, "flow", 0);
    let mut g = || GeomState {
        lengths: [0.0; 3].map(|_| rng.random_range(-1.0..1.0)),
        angles: [0.0; 3].map(|_| rng.random_range(-1.0..1.0)),
        positions: vec![[0.0; 3].map(|_| rng.random_range(-1.0..1.0)); 2],
    };
    let (x0, c) = (g(), g());

    let mut const_err: f64 = 0.0;
    for n_step in [1, 7, 100, 1000] {
        let cfg = FlowConfig { n_step, omega: 0.0, ..FlowConfig::default() };
        let out = integrate_from(&ConstantField(c.clone()), &tr, &noise, vec![x0.clone()], &cfg).unwrap().remove(0);
        let exact = GeomState::lincomb(1.0, &x0, 1.0, &c);
        let diff = GeomState::lincomb(1.0, &out, -1.0, &exact);
        let all = diff.lengths.iter().chain(&diff.angles).chain(diff.positions.iter().flatten());
        const_err = all.fold(const_err, |m, v| m.max(v.abs()));
    }
    let constant = const_err <= 1e3 * f64::EPSILON;

    let cfg = FlowConfig { n_step: 1000, omega: 0.0, ..FlowConfig::default() };
    let out = integrate_from(&DecayField, &tr, &noise, vec![x0.clone()], &cfg).unwrap().remove(0);
    let e = (-1.0f64).exp();
    let lin_err = out.lengths.iter().zip(&x0.lengths).map(|(x, a)| (x - e * a).abs() / a.abs()).fold(0.0, f64::max);
    let linear = lin_err <= C5_LINEAR_REL;

    // a real velocity network: ω = 0 must be the plain conditional field
    let model = Model::new(ModelConfig::desk(), LengthPrior::default(), 5).unwrap();
    let field = model.flow.bound(&model.params);
    let z: Vec<f64> = (0..model.d_z()).map(|_| rng.sample(StandardNormal)).collect();
    let other: Vec<Vec<f64>> = vec![(0..model.d_z()).map(|_| rng.sample(StandardNormal)).collect()];
    let trz = [Trajectory { latent: &z, species: &species }];
    let cfg = FlowConfig { n_step: 20, omega: 0.0, ..FlowConfig::default() };
    let start = GeomState::from(&sample_prior(2, &model.prior, &mut rng));
    let guided = integrate_from(&field, &trz, &other, vec![start.clone()], &cfg).unwrap().remove(0);
    let mut manual = start;
    let dt = 1.0 / cfg.n_step as f64;
    for step in 0..cfg.n_step {
        let q = FlowQuery { state: &manual, t: step as f64 / cfg.n_step as f64, species: &species, latent: &z };
        let v = field.velocities(&[q]).remove(0);
        manual.axpy(dt, &v);
    }
    let cfg_zero = guided == manual;
    outcome(
        constant && linear && cfg_zero,
        format!("constant field max error {const_err:.1e}, linear field relative error {lin_err:.2e}, omega=0 bit-equal: {cfg_zero}"),
    )
}

// ---- 6 ------------------------------------------------------------------

fn c6_priors() -> Outcome {
    let prior = LengthPrior::default();
    let mut means = Vec::new();
    for n in [2usize, 8, 20] {
        let mut rng = stream(6, "density", n as u64);
        let d: Vec<f64> = (0..C6_MC).map(|_| n as f64 / volume(&sample_prior(n, &prior, &mut rng)).unwrap()).collect();
        means.push(mean(&d));
    }
    let (lo, hi) = means.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| (a.min(m), b.max(m)));
    let spread = (hi - lo) / lo;

    let cfg = FlowConfig { eps_mix: 0.1, ..FlowConfig::default() };
    let mut rng = stream(6, "time", 0);
    let mut ts: Vec<f64> = (0..C6_KS_N).map(|_| sample_time(&cfg, &mut rng)).collect();
    ts.sort_by(f64::total_cmp);
    let n = ts.len() as f64;
    let ks = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = time_cdf(t, cfg.eps_mix);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let critical = C6_KS_COEF / n.sqrt();
    outcome(
        spread < C6_DENSITY_REL && ks < critical,
        format!(
            "mean density at N=2/8/20: {:.4}/{:.4}/{:.4} (spread {:.2}%), KS {ks:.5} vs critical {critical:.5}",
            means[0],
            means[1],
            means[2],
            100.0 * spread
        ),
    )
}

// ---- 7 ------------------------------------------------------------------

/// Log-probabilities drawn afresh for every distinct prefix.
struct RandomTable {
    vocab: usize,
    seed: u64,
}

impl TokenModel for RandomTable {
    fn n_outputs(&self) -> usize {
        self.vocab + 2
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        prefixes
            .iter()
            .map(|p| {
                let key = p.iter().fold(0u64, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
                let mut rng = stream(self.seed, "beam-table", key);
                let logits: Vec<f64> = (0..self.vocab + 1).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
                // token 0 is Start and never emitted
                std::iter::once(f64::NEG_INFINITY).chain(logits.iter().map(|x| x - lse)).collect()
            })
            .collect()
    }
}

fn c7_beam_search() -> Outcome {
    let t0 = Instant::now();
    let mut agree = 0;
    let mut pick = stream(7, "beam", 0);
    for s in 0..C7_MODELS {
        let v = pick.random_range(2..=4usize);
        let l = pick.random_range(1..=4usize);
        let m = RandomTable { vocab: v, seed: s };
        let spec = BeamSpec { width: v.pow(l as u32), start: 0, stop: 1, max_tokens: l };
        let best = beam_search(&m, &spec).remove(0);
        let exact = brute_force(&m, &spec);
        if best.tokens == exact.tokens && (best.score - exact.score).abs() <= 1e-12 {
            agree += 1;
        }
    }
    // the transformer decoder itself, on small vocabularies
    let mut net_agree = 0;
    for s in 0..C7_NETWORKS {
        let v = pick.random_range(2..=4usize);
        let l = pick.random_range(1..=4usize);
        let vocab = Vocab::new(v, l);
        let mut store = ParamStore::new();
        let mut rng = stream(7, "beam-net", s);
        let tc = TransformerConfig { d_model: 16, n_blocks: 1, n_heads: 2, n_registers: 0, mlp_dim: 16, n_mlp: 1, dropout: 0.0 };
        let dec = AtomDecoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &tc, &vocab, 8);
        let z = LatentVector::new((0..8).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let zm = dec.modulate_latent(&store, &z).unwrap();
        let bound = dec.bound(&store, &zm);
        let spec = BeamSpec { width: v.pow(l as u32), start: vocab.start().0, stop: vocab.stop().0, max_tokens: l };
        let best = beam_search(&bound, &spec).remove(0);
        let exact = brute_force(&bound, &spec);
        if best.tokens == exact.tokens && (best.score - exact.score).abs() <= 1e-12 {
            net_agree += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        agree == C7_MODELS && net_agree == C7_NETWORKS && secs < C7_SECONDS,
        format!("{agree}/{C7_MODELS} random tables and {net_agree}/{C7_NETWORKS} decoder networks match exhaustive search, {secs:.1}s"),
    )
}

// ---- 8 ------------------------------------------------------------------

fn c8_reconstruction() -> Outcome {
    let m = clique_model();
    let mut cfg = m.cfg.clone();
    cfg.flow.n_step = C8_FLOW_STEPS;
    cfg.paths.out_dir = tempfile::tempdir().unwrap().keep();
    let rows = ex::reconstruct(&cfg, &m.model, m.task.eval_records(C8_RECORDS)).unwrap();
    let ratio = |w: f64| rows.iter().find(|r| r.omega == w).unwrap().species_ratio();
    let (r0, r2, r4) = (ratio(0.0), ratio(2.0), ratio(4.0));
    let strict: Vec<String> = rows.iter().map(|r| format!("{:.0}%", 100.0 * r.match_ratio())).collect();
    outcome(
        m.seconds <= TRAIN_SECONDS && r2 >= C8_MIN_RATIO && r2 >= r0 - C8_TREND_SLACK,
        format!(
            "species-exact at omega 0/2/4: {:.0}%/{:.0}%/{:.0}% (with geometry {}), trained {} steps in {:.0}s",
            100.0 * r0,
            100.0 * r2,
            100.0 * r4,
            strict.join("/"),
            TRAIN_STEPS,
            m.seconds
        ),
    )
}

// ---- 9 ------------------------------------------------------------------

fn c9_end_to_end() -> Outcome {
    let m = clique_model();
    let t0 = Instant::now();
    let mut cfg = m.cfg.clone();
    cfg.paths.out_dir = tempfile::tempdir().unwrap().keep();
    let s = ex::optimize_designs(&cfg, &m.model, m.task.eval_records(C9_RECORDS), &m.task.spec).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        s.improvement() >= C9_MIN_IMPROVEMENT && s.filtered_oracle <= s.discovered_oracle + C9_FILTER_SLACK && secs <= C9_SECONDS,
        format!(
            "mean oracle {:.4} -> {:.4} ({:.1}% better), top-10% mean {:.4}, {secs:.0}s",
            s.initial_oracle,
            s.discovered_oracle,
            100.0 * s.improvement(),
            s.filtered_oracle
        ),
    )
}

// ---- 10 -----------------------------------------------------------------

fn c10_timing() -> Outcome {
    let m = Model::new(ModelConfig::desk(), LengthPrior::default(), 10).unwrap();
    let mut cfg = RunConfig::default();
    cfg.es.design_steps = C10_DESIGN_STEPS;
    cfg.flow.n_step = C10_FLOW_STEPS;
    cfg.paths.out_dir = tempfile::tempdir().unwrap().keep();
    cfg.toy.n_records = 500;
    let task = Task::prepare(&cfg).unwrap();
    let rows = ex::timing(&cfg, &m, &task.test).unwrap();
    let mbo: Vec<f64> = rows.iter().map(|r| r.mbo_seconds).collect();
    let (lo, hi) = mbo.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = (hi - lo) / lo;
    let growth = rows.last().unwrap().decode_seconds / rows[0].decode_seconds;
    let cells: Vec<String> = rows.iter().map(|r| format!("N={} mbo {:.2}s decode {:.2}s", r.n, r.mbo_seconds, r.decode_seconds)).collect();
    outcome(
        spread < C10_MAX_MBO_SPREAD && growth >= C10_MIN_DECODE_GROWTH,
        format!(
            "{}; mbo spread {:.0}%, decode growth {growth:.1}x on {} thread(s)",
            cells.join(", "),
            100.0 * spread,
            rayon::current_num_threads()
        ),
    )
}

// ---- 11 -----------------------------------------------------------------

fn improvement(t: &Trained, s: u64) -> f64 {
    let records = &t.task.test[s as usize * C11_LATENTS..(s as usize + 1) * C11_LATENTS];
    let start = encode_means(&t.model, records);
    let surrogate = cliqueflow::mbo::ModelSurrogate { model: &t.model };
    let run = optimize(&start, &surrogate, &t.cfg.es, s).unwrap();
    let after = score_latents(&t.model, &run.latents, &t.task.spec, &t.cfg.decoding, &t.cfg.flow, s).unwrap();
    let before: Vec<f64> = records.iter().map(|r| cliqueflow::toy::oracle(&r.material, &t.task.spec)).collect();
    (mean(&before) - mean(&after)) / mean(&before).abs()
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    x[x.len() / 2]
}

fn c11_clique_ablation() -> Outcome {
    let (cq, flat) = (clique_model(), flat_model());
    let a: Vec<f64> = (0..C11_SEEDS).map(|s| improvement(cq, s)).collect();
    let b: Vec<f64> = (0..C11_SEEDS).map(|s| improvement(flat, s)).collect();
    let (ma, mb) = (median(a.clone()), median(b.clone()));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/");
    outcome(
        ma >= mb,
        format!(
            "median improvement cliques (8,16,1) {:.1}% [{}] vs flat (1,121,0) {:.1}% [{}], training {:.0}s vs {:.0}s",
            100.0 * ma,
            fmt(&a),
            100.0 * mb,
            fmt(&b),
            cq.seconds,
            flat.seconds
        ),
    )
}

// ---- driver -------------------------------------------------------------

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("single-threaded pool");
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "chain/flatten round trip", c1_chain_round_trip),
        (2, "loss gradient vs finite differences", c2_loss_gradients),
        (3, "ES estimator", c3_es_estimator),
        (4, "latent optimizer and gradient ablation", c4_latent_optimizer),
        (5, "flow sampler", c5_flow_sampler),
        (6, "priors", c6_priors),
        (7, "beam search exhaustiveness", c7_beam_search),
        (8, "reconstruction", c8_reconstruction),
        (9, "end-to-end optimization", c9_end_to_end),
        (10, "timing", c10_timing),
        (11, "clique ablation", c11_clique_ablation),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let o = f();
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
