//! Conditional flow matching over unit-cell geometry.
//!
//! Geometry flows from a prior sample `G₀` to data `G₁` along straight lines.
//! Sampling integrates a learned velocity with explicit Euler steps and
//! classifier-free guidance against a noise latent.

mod network;

pub use network::{time_embedding, BoundVelocity, FlowInputs, VelocityNet, VelocityVars};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crystal::{AtomType, Geometry, Material, MaterialRecord};

pub const ANGLE_MARGIN: f64 = 1e-3;
pub const MIN_LENGTH: f64 = 1e-3;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlowError {
    #[error("geometries hold {0} and {1} atoms")]
    AtomCountMismatch(usize, usize),
    #[error("non-finite state in trajectory {trajectory} at step {step}")]
    NonFinite { trajectory: usize, step: usize },
    #[error("need at least 2 records to fit the length prior, got {0}")]
    InsufficientData(usize),
    #[error("empty species sequence")]
    EmptySpecies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(rename = "N_step")]
    pub n_step: usize,
    #[serde(rename = "w_cfg")]
    pub omega: f64,
    pub eps_mix: f64,
    #[serde(rename = "temp_flow")]
    pub tau_pos: f64,
    pub p_lat: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { n_step: 1000, omega: 2.0, eps_mix: 0.1, tau_pos: 16.0, p_lat: 0.1 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_step == 0 {
            return Err("N_step must be at least 1".into());
        }
        if !(self.omega >= 0.0) {
            return Err(format!("w_cfg {} must be non-negative", self.omega));
        }
        if !(0.0..=1.0).contains(&self.eps_mix) || !(0.0..=1.0).contains(&self.p_lat) {
            return Err("eps_mix and p_lat must lie in [0, 1]".into());
        }
        if !(self.tau_pos > 0.0) {
            return Err(format!("temp_flow {} must be positive", self.tau_pos));
        }
        Ok(())
    }
}

/// Log-normal model of canonical lengths `l / ∛N`, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPrior {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl Default for LengthPrior {
    fn default() -> Self {
        LengthPrior { mu: [0.5; 3], sigma: [0.2; 3] }
    }
}

/// Per-axis mean and unbiased standard deviation of log canonical lengths.
pub fn fit_length_prior(records: &[MaterialRecord]) -> Result<LengthPrior, FlowError> {
    let n = records.len();
    if n < 2 {
        return Err(FlowError::InsufficientData(n));
    }
    let logs: Vec<[f64; 3]> = records
        .iter()
        .map(|r| {
            let m = &r.material;
            crate::crystal::canonicalize_lengths(m.geometry().lengths(), m.n_atoms()).map(f64::ln)
        })
        .collect();
    let mut prior = LengthPrior { mu: [0.0; 3], sigma: [0.0; 3] };
    for k in 0..3 {
        let mean = logs.iter().map(|l| l[k]).sum::<f64>() / n as f64;
        let var = logs.iter().map(|l| (l[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        prior.mu[k] = mean;
        prior.sigma[k] = var.sqrt().max(SIGMA_FLOOR);
    }
    Ok(prior)
}

/// Prior geometry: angles `U(π/3, 2π/3)`, positions `U[0,1)`, lengths
/// `∛N · exp(N(μ, σ²))`.
pub fn sample_prior<R: Rng + ?Sized>(n_atom: usize, prior: &LengthPrior, rng: &mut R) -> Geometry {
    assert!(n_atom >= 1, "prior needs at least one atom");
    let scale = (n_atom as f64).cbrt();
    let mut lengths = [0.0; 3];
    for k in 0..3 {
        let n = Normal::new(prior.mu[k], prior.sigma[k]).expect("valid prior");
        lengths[k] = scale * n.sample(rng).exp();
    }
    let mut angles = [0.0; 3];
    for a in &mut angles {
        *a = PI / 3.0 + rng.random::<f64>() * (PI / 3.0);
        // a draw of exactly 0 would land on the open boundary
        if *a <= PI / 3.0 {
            *a = f64::EPSILON + PI / 3.0;
        }
    }
    let positions = (0..n_atom).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    Geometry::new(lengths, angles, positions).expect("prior samples satisfy the geometry invariants")
}

/// Lifted logit-normal: uniform with probability `eps_mix`, else `σ(n)`, `n ~ N(0,1)`.
pub fn sample_time<R: Rng + ?Sized>(cfg: &FlowConfig, rng: &mut R) -> f64 {
    if rng.random::<f64>() < cfg.eps_mix {
        rng.random::<f64>()
    } else {
        let n: f64 = StandardNormal.sample(rng);
        1.0 / (1.0 + (-n).exp())
    }
}

/// CDF of [`sample_time`]: `(1−ε)·Φ(logit t) + ε·t`.
pub fn time_cdf(t: f64, eps_mix: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let logit = (t / (1.0 - t)).ln();
    let phi = 0.5 * (1.0 + libm::erf(logit / std::f64::consts::SQRT_2));
    (1.0 - eps_mix) * phi + eps_mix * t
}

/// Unconstrained geometry along a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct GeomState {
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
    pub positions: Vec<[f64; 3]>,
}

impl From<&Geometry> for GeomState {
    fn from(g: &Geometry) -> Self {
        GeomState { lengths: g.lengths(), angles: g.angles(), positions: g.positions().to_vec() }
    }
}

impl GeomState {
    pub fn zeros(n_atoms: usize) -> Self {
        GeomState { lengths: [0.0; 3], angles: [0.0; 3], positions: vec![[0.0; 3]; n_atoms] }
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.lengths.iter().chain(&self.angles).chain(self.positions.iter().flatten())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.lengths.iter_mut().chain(self.angles.iter_mut()).chain(self.positions.iter_mut().flatten())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &GeomState) {
        assert_eq!(self.n_atoms(), other.n_atoms(), "axpy: atom counts differ");
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    /// `a·x + b·y`, componentwise.
    pub fn lincomb(a: f64, x: &GeomState, b: f64, y: &GeomState) -> GeomState {
        let mut out = x.clone();
        for (o, (xv, yv)) in out.values_mut().zip(x.values().zip(y.values())) {
            *o = a * xv + b * yv;
        }
        out
    }

    /// Wraps positions into `[0, 1)` and clamps angles and lengths into range.
    pub fn finalize(&self) -> Geometry {
        let wrap = |x: f64| {
            let w = x.rem_euclid(1.0);
            if w >= 1.0 {
                0.0
            } else {
                w
            }
        };
        Geometry::new(
            self.lengths.map(|l| l.max(MIN_LENGTH)),
            self.angles.map(|a| a.clamp(ANGLE_MARGIN, PI - ANGLE_MARGIN)),
            self.positions.iter().map(|p| p.map(wrap)).collect(),
        )
        .expect("finalized state satisfies the geometry invariants")
    }
}

/// `(1−t)·G₀ + t·G₁`, componentwise and without wrapping.
pub fn interpolate(g0: &GeomState, g1: &GeomState, t: f64) -> Result<GeomState, FlowError> {
    if g0.n_atoms() != g1.n_atoms() {
        return Err(FlowError::AtomCountMismatch(g0.n_atoms(), g1.n_atoms()));
    }
    Ok(GeomState::lincomb(1.0 - t, g0, t, g1))
}

/// One velocity evaluation request.
pub struct FlowQuery<'a> {
    pub state: &'a GeomState,
    pub t: f64,
    pub species: &'a [AtomType],
    /// Flat latent (or the noise that replaces it).
    pub latent: &'a [f64],
}

/// A velocity field over geometry, evaluated in batches.
pub trait VelocityField {
    fn velocities(&self, queries: &[FlowQuery<'_>]) -> Vec<GeomState>;
}

/// Squared-error flow loss `L_len + L_ang + τ_pos·L_pos` between predicted
/// and target velocities (position errors summed over atoms).
pub fn velocity_loss(pred: &GeomState, target: &GeomState, tau_pos: f64) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let pos: f64 = pred.positions.iter().zip(&target.positions).map(|(p, q)| sq(p, q)).sum();
    sq(&pred.lengths, &target.lengths) + sq(&pred.angles, &target.angles) + tau_pos * pos
}

/// Random pieces of one flow-matching training example.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub t: f64,
    pub g_t: GeomState,
    /// `G₁ − G₀`.
    pub target: GeomState,
    /// Replacement latent when the true one is masked.
    pub masked: Option<Vec<f64>>,
}

pub fn draw_flow_sample<R: Rng + ?Sized>(
    m: &Material,
    d_z: usize,
    cfg: &FlowConfig,
    prior: &LengthPrior,
    rng: &mut R,
) -> FlowSample {
    let g1 = GeomState::from(m.geometry());
    let g0 = GeomState::from(&sample_prior(m.n_atoms(), prior, rng));
    let t = sample_time(cfg, rng);
    let masked = (rng.random::<f64>() < cfg.p_lat).then(|| (0..d_z).map(|_| StandardNormal.sample(rng)).collect());
    FlowSample {
        g_t: interpolate(&g0, &g1, t).expect("same atom count"),
        target: GeomState::lincomb(1.0, &g1, -1.0, &g0),
        t,
        masked,
    }
}

/// Flow-matching loss of one material under any velocity field.
pub fn flow_loss<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    m: &Material,
    z: &[f64],
    cfg: &FlowConfig,
    prior: &LengthPrior,
    rng: &mut R,
) -> f64 {
    let s = draw_flow_sample(m, z.len(), cfg, prior, rng);
    let latent = s.masked.as_deref().unwrap_or(z);
    let q = FlowQuery { state: &s.g_t, t: s.t, species: m.species(), latent };
    let v = field.velocities(&[q]).pop().expect("one velocity");
    velocity_loss(&v, &s.target, cfg.tau_pos)
}

/// One trajectory to integrate.
pub struct Trajectory<'a> {
    pub latent: &'a [f64],
    pub species: &'a [AtomType],
}

/// Integrates every trajectory from a prior draw to `t = 1` with guided
/// Euler steps and returns the unconstrained end states. Each trajectory
/// draws `G₀` and then its guidance noise from its own generator.
pub fn integrate_raw<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    trajectories: &[Trajectory<'_>],
    cfg: &FlowConfig,
    prior: &LengthPrior,
    rngs: &mut [R],
) -> Result<Vec<GeomState>, FlowError> {
    assert_eq!(trajectories.len(), rngs.len(), "one generator per trajectory");
    let mut states = Vec::with_capacity(trajectories.len());
    let mut noise = Vec::with_capacity(trajectories.len());
    for (tr, rng) in trajectories.iter().zip(rngs.iter_mut()) {
        if tr.species.is_empty() {
            return Err(FlowError::EmptySpecies);
        }
        states.push(GeomState::from(&sample_prior(tr.species.len(), prior, rng)));
        noise.push((0..tr.latent.len()).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>());
    }
    integrate_from(field, trajectories, &noise, states, cfg)
}

/// Euler integration from given start states with given guidance noise.
pub fn integrate_from<F: VelocityField + ?Sized>(
    field: &F,
    trajectories: &[Trajectory<'_>],
    noise: &[Vec<f64>],
    mut states: Vec<GeomState>,
    cfg: &FlowConfig,
) -> Result<Vec<GeomState>, FlowError> {
    let dt = 1.0 / cfg.n_step as f64;
    let guided = cfg.omega != 0.0;
    for step in 0..cfg.n_step {
        let t = step as f64 / cfg.n_step as f64;
        let mut queries = Vec::with_capacity(states.len() * if guided { 2 } else { 1 });
        for (i, tr) in trajectories.iter().enumerate() {
            queries.push(FlowQuery { state: &states[i], t, species: tr.species, latent: tr.latent });
            if guided {
                queries.push(FlowQuery { state: &states[i], t, species: tr.species, latent: &noise[i] });
            }
        }
        let v = field.velocities(&queries);
        drop(queries);
        for (i, s) in states.iter_mut().enumerate() {
            if guided {
                let g = GeomState::lincomb(1.0 + cfg.omega, &v[2 * i], -cfg.omega, &v[2 * i + 1]);
                s.axpy(dt, &g);
            } else {
                s.axpy(dt, &v[i]);
            }
            if !s.is_finite() {
                return Err(FlowError::NonFinite { trajectory: i, step });
            }
        }
    }
    Ok(states)
}

/// Decoded geometries for every trajectory (wrapped and clamped).
pub fn integrate<F: VelocityField + ?Sized, R: Rng>(
    field: &F,
    trajectories: &[Trajectory<'_>],
    cfg: &FlowConfig,
    prior: &LengthPrior,
    rngs: &mut [R],
) -> Result<Vec<Geometry>, FlowError> {
    Ok(integrate_raw(field, trajectories, cfg, prior, rngs)?.iter().map(GeomState::finalize).collect())
}
