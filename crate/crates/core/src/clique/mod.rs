//! Chain-of-cliques view of the latent vector, the per-clique KL term and the
//! additively decomposed property predictor.

mod predictor;

pub use predictor::CliquePredictor;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Knot coordinates must agree to this tolerance when flattening.
pub const KNOT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CliqueError {
    #[error("invalid clique shape: {0}")]
    InvalidShape(String),
    #[error("latent has {got} entries, shape needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("knot mismatch between clique {clique} and {next} at offset {offset}", next = clique + 1)]
    KnotMismatch { clique: usize, offset: usize },
    #[error("clique index {0} out of range")]
    CliqueIndex(usize),
    #[error("non-finite latent entry at {0}")]
    NonFinite(usize),
}

/// Sizes of the overlapping-clique decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRepr", into = "ShapeRepr")]
pub struct CliqueShape {
    n_cliques: usize,
    d_clique: usize,
    d_knot: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeRepr {
    n_cliques: usize,
    clique_dim: usize,
    knot_dim: usize,
}

impl TryFrom<ShapeRepr> for CliqueShape {
    type Error = CliqueError;
    fn try_from(r: ShapeRepr) -> Result<Self, Self::Error> {
        CliqueShape::new(r.n_cliques, r.clique_dim, r.knot_dim)
    }
}

impl From<CliqueShape> for ShapeRepr {
    fn from(s: CliqueShape) -> Self {
        ShapeRepr { n_cliques: s.n_cliques, clique_dim: s.d_clique, knot_dim: s.d_knot }
    }
}

impl CliqueShape {
    pub fn new(n_cliques: usize, d_clique: usize, d_knot: usize) -> Result<Self, CliqueError> {
        if n_cliques == 0 || d_clique == 0 {
            return Err(CliqueError::InvalidShape("n_cliques and d_clique must be positive".into()));
        }
        if d_knot >= d_clique {
            return Err(CliqueError::InvalidShape(format!("d_knot {d_knot} must be below d_clique {d_clique}")));
        }
        Ok(CliqueShape { n_cliques, d_clique, d_knot })
    }

    /// The unstructured latent of the same width: one clique covering all of it.
    pub fn flat(d_z: usize) -> Self {
        CliqueShape { n_cliques: 1, d_clique: d_z, d_knot: 0 }
    }

    pub fn n_cliques(&self) -> usize {
        self.n_cliques
    }

    pub fn d_clique(&self) -> usize {
        self.d_clique
    }

    pub fn d_knot(&self) -> usize {
        self.d_knot
    }

    /// Offset between the first coordinates of consecutive cliques.
    pub fn stride(&self) -> usize {
        self.d_clique - self.d_knot
    }

    pub fn d_z(&self) -> usize {
        self.n_cliques * self.stride() + self.d_knot
    }

    /// Flat indices (0-based) covered by clique `c` (0-based).
    pub fn clique_range(&self, c: usize) -> std::ops::Range<usize> {
        c * self.stride()..c * self.stride() + self.d_clique
    }
}

impl Default for CliqueShape {
    fn default() -> Self {
        CliqueShape { n_cliques: 8, d_clique: 16, d_knot: 1 }
    }
}

/// Flat latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self, CliqueError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CliqueError::NonFinite(i));
        }
        Ok(LatentVector(values))
    }

    pub fn zeros(d: usize) -> Self {
        LatentVector(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Clique rows `Z` (n_cliques × d_clique).
#[derive(Clone, Debug, PartialEq)]
pub struct CliqueChain(Array2<f64>);

impl CliqueChain {
    pub fn rows(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn from_rows(rows: Array2<f64>) -> Self {
        CliqueChain(rows)
    }

    pub fn row(&self, c: usize) -> Vec<f64> {
        self.0.row(c).to_vec()
    }
}

/// `Z[i][j] = z[i·(d_clique − d_knot) + j]` (0-based).
pub fn chain(z: &LatentVector, shape: &CliqueShape) -> Result<CliqueChain, CliqueError> {
    if z.len() != shape.d_z() {
        return Err(CliqueError::DimensionMismatch { expected: shape.d_z(), got: z.len() });
    }
    let rows = Array2::from_shape_fn((shape.n_cliques, shape.d_clique), |(i, j)| z.0[i * shape.stride() + j]);
    Ok(CliqueChain(rows))
}

/// Inverse of [`chain`]; knots must agree within [`KNOT_TOLERANCE`].
pub fn flatten(zc: &CliqueChain, shape: &CliqueShape) -> Result<LatentVector, CliqueError> {
    let rows = &zc.0;
    if rows.dim() != (shape.n_cliques, shape.d_clique) {
        return Err(CliqueError::DimensionMismatch {
            expected: shape.n_cliques * shape.d_clique,
            got: rows.len(),
        });
    }
    let stride = shape.stride();
    for i in 0..shape.n_cliques.saturating_sub(1) {
        for o in 0..shape.d_knot {
            if (rows[[i, stride + o]] - rows[[i + 1, o]]).abs() > KNOT_TOLERANCE {
                return Err(CliqueError::KnotMismatch { clique: i, offset: o });
            }
        }
    }
    let mut z = vec![0.0; shape.d_z()];
    for i in 0..shape.n_cliques {
        for j in 0..shape.d_clique {
            z[i * stride + j] = rows[[i, j]];
        }
    }
    LatentVector::new(z)
}

/// `KL(N(μ_c, σ_c²) ‖ N(0, I))` over the coordinates of clique `c` (0-based).
pub fn clique_kl(mu: &LatentVector, log_sigma: &LatentVector, shape: &CliqueShape, c: usize) -> Result<f64, CliqueError> {
    if c >= shape.n_cliques {
        return Err(CliqueError::CliqueIndex(c));
    }
    for v in [mu, log_sigma] {
        if v.len() != shape.d_z() {
            return Err(CliqueError::DimensionMismatch { expected: shape.d_z(), got: v.len() });
        }
    }
    Ok(shape
        .clique_range(c)
        .map(|k| {
            let (m, ls) = (mu.0[k], log_sigma.0[k]);
            0.5 * ((2.0 * ls).exp() + m * m - 1.0 - 2.0 * ls)
        })
        .sum())
}
