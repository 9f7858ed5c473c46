//! Synthetic datasets labelled by analytic property oracles.
//!
//! Lower oracle values are better throughout.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::crystal::{AtomType, Material, MaterialRecord, Vocab};
use crate::flow::{sample_prior, LengthPrior};
use crate::rng::stream;

/// An analytic property of a material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleSpec {
    /// Mean species weight.
    CompositionAffinity { weights: Vec<f64> },
    /// Distance of the atom density from a target, plus a composition term.
    Packing { weights: Vec<f64>, target_density: f64, coupling: f64 },
    /// `primary + λ·max(0, constraint − τ)`.
    Regularized { primary: Box<OracleSpec>, constraint: Box<OracleSpec>, lambda_reg: f64, tau_reg: f64 },
}

fn mean_weight(weights: &[f64], m: &Material) -> f64 {
    m.species().iter().map(|a| weights[a.0]).sum::<f64>() / m.n_atoms() as f64
}

/// Atom density with the cell volume floored, so degenerate cells stay finite.
fn safe_density(m: &Material) -> f64 {
    let g = m.geometry();
    let [ca, cb, cg] = g.angles().map(f64::cos);
    let radicand = (1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg).max(1e-12);
    let [a, b, c] = g.lengths();
    m.n_atoms() as f64 / (a * b * c * radicand.sqrt())
}

impl OracleSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<(), String> {
        let check = |w: &[f64]| {
            if w.len() != vocab.species {
                Err(format!("{} species weights for a vocabulary of {}", w.len(), vocab.species))
            } else if w.iter().any(|x| !x.is_finite()) {
                Err("species weights must be finite".into())
            } else {
                Ok(())
            }
        };
        match self {
            OracleSpec::CompositionAffinity { weights } => check(weights),
            OracleSpec::Packing { weights, target_density, coupling } => {
                check(weights)?;
                if !(*target_density > 0.0 && *coupling >= 0.0) {
                    return Err("packing needs a positive target density and nonnegative coupling".into());
                }
                Ok(())
            }
            OracleSpec::Regularized { primary, constraint, lambda_reg, tau_reg } => {
                if !(lambda_reg.is_finite() && tau_reg.is_finite()) {
                    return Err("regularizer settings must be finite".into());
                }
                primary.validate(vocab)?;
                constraint.validate(vocab)
            }
        }
    }

    /// Best achievable value when it is known in closed form.
    pub fn optimum(&self) -> Option<f64> {
        match self {
            OracleSpec::CompositionAffinity { weights } => weights.iter().copied().reduce(f64::min),
            _ => None,
        }
    }
}

pub fn oracle(m: &Material, spec: &OracleSpec) -> f64 {
    match spec {
        OracleSpec::CompositionAffinity { weights } => mean_weight(weights, m),
        OracleSpec::Packing { weights, target_density, coupling } => {
            (safe_density(m) - target_density).abs() + coupling * mean_weight(weights, m)
        }
        OracleSpec::Regularized { primary, constraint, lambda_reg, tau_reg } => {
            oracle(m, primary) + lambda_reg * (oracle(m, constraint) - tau_reg).max(0.0)
        }
    }
}

/// The oracle value from species alone, for oracles that ignore geometry.
pub fn species_oracle(species: &[AtomType], spec: &OracleSpec) -> Option<f64> {
    match spec {
        OracleSpec::CompositionAffinity { weights } if !species.is_empty() => {
            Some(species.iter().map(|a| weights[a.0]).sum::<f64>() / species.len() as f64)
        }
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    CompositionAffinity,
    Packing,
    Regularized,
}

/// Settings of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_records: usize,
    pub oracle: OracleKind,
    /// Species are drawn with probability proportional to `exp(skew·w)`, so
    /// low-weight (good) species are rare for positive skew.
    pub skew: f64,
    pub target_density: f64,
    pub coupling: f64,
    pub lambda_reg: f64,
    pub tau_reg: f64,
    /// Emit each record's species in ascending order.
    pub sort_species: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_records: 5000,
            oracle: OracleKind::CompositionAffinity,
            skew: 3.0,
            target_density: 1.0,
            coupling: 0.5,
            lambda_reg: 20.0,
            tau_reg: -0.2,
            sort_species: true,
        }
    }
}

impl ToyConfig {
    /// Oracle with species weights `~ U(0,1)` drawn from `seed`.
    pub fn oracle_spec(&self, vocab: &Vocab, seed: u64) -> OracleSpec {
        let mut rng = stream(seed, "oracle-weights", 0);
        let weights: Vec<f64> = (0..vocab.species).map(|_| rng.random()).collect();
        let affinity = OracleSpec::CompositionAffinity { weights: weights.clone() };
        let packing = OracleSpec::Packing { weights, target_density: self.target_density, coupling: self.coupling };
        match self.oracle {
            OracleKind::CompositionAffinity => affinity,
            OracleKind::Packing => packing,
            // the packing term, shifted by its target, acts as the constraint
            OracleKind::Regularized => OracleSpec::Regularized {
                primary: Box::new(affinity),
                constraint: Box::new(packing),
                lambda_reg: self.lambda_reg,
                tau_reg: self.tau_reg,
            },
        }
    }

    /// Species sampling probabilities for the given weights.
    pub fn species_probabilities(&self, weights: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = weights.iter().map(|w| (self.skew * w).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

fn species_weights(spec: &OracleSpec) -> &[f64] {
    match spec {
        OracleSpec::CompositionAffinity { weights } | OracleSpec::Packing { weights, .. } => weights,
        OracleSpec::Regularized { primary, .. } => species_weights(primary),
    }
}

/// `n` labelled records. Record `i` depends only on `(seed, i)`.
pub fn generate_dataset(
    n: usize,
    cfg: &ToyConfig,
    spec: &OracleSpec,
    vocab: &Vocab,
    prior: &LengthPrior,
    seed: u64,
) -> Vec<MaterialRecord> {
    let probs = cfg.species_probabilities(species_weights(spec));
    let categorical = WeightedIndex::new(&probs).expect("finite positive probabilities");
    (0..n as u64)
        .map(|i| {
            let mut rng = stream(seed, "toy-record", i);
            let n_atom = rng.random_range(1..=vocab.n_max);
            let mut species: Vec<AtomType> = (0..n_atom).map(|_| AtomType(categorical.sample(&mut rng))).collect();
            if cfg.sort_species {
                species.sort();
            }
            let geometry = sample_prior(n_atom, prior, &mut rng);
            let material = Material::new(species, geometry, vocab).expect("generated material is valid");
            let y = oracle(&material, spec);
            MaterialRecord::new(material, y).expect("oracle values are finite")
        })
        .collect()
}
