//! Row-packed views of a set of materials, shared by every network.

use std::rc::Rc;

use ndarray::Array2;

use crate::crystal::{AtomType, Geometry, Material};
use crate::nn::Segments;

/// Geometry fields of a batch, one row per material (lengths, angles) or per
/// atom (positions), in input order.
#[derive(Clone, Debug)]
pub struct GeometryBatch {
    pub lengths: Array2<f64>,
    pub angles: Array2<f64>,
    pub positions: Array2<f64>,
}

impl GeometryBatch {
    pub fn from_geometries<'a>(geoms: impl IntoIterator<Item = &'a Geometry>) -> Self {
        let geoms: Vec<&Geometry> = geoms.into_iter().collect();
        let n_atoms: usize = geoms.iter().map(|g| g.n_atoms()).sum();
        let mut lengths = Array2::zeros((geoms.len(), 3));
        let mut angles = Array2::zeros((geoms.len(), 3));
        let mut positions = Array2::zeros((n_atoms, 3));
        let mut r = 0;
        for (i, g) in geoms.iter().enumerate() {
            for k in 0..3 {
                lengths[[i, k]] = g.lengths()[k];
                angles[[i, k]] = g.angles()[k];
            }
            for p in g.positions() {
                for k in 0..3 {
                    positions[[r, k]] = p[k];
                }
                r += 1;
            }
        }
        GeometryBatch { lengths, angles, positions }
    }
}

/// Species and geometry of a batch of materials, row-packed.
#[derive(Clone, Debug)]
pub struct MaterialBatch {
    pub n_atoms: Vec<usize>,
    pub species: Vec<usize>,
    pub geometry: GeometryBatch,
    /// One segment of `n_atoms[i]` rows per material.
    pub atom_segs: Segments,
}

impl MaterialBatch {
    pub fn new(materials: &[&Material]) -> Self {
        assert!(!materials.is_empty(), "empty material batch");
        let n_atoms: Vec<usize> = materials.iter().map(|m| m.n_atoms()).collect();
        let species = materials.iter().flat_map(|m| m.species().iter().map(|a| a.0)).collect();
        MaterialBatch {
            atom_segs: Segments::from_lengths(&n_atoms).expect("materials have at least one atom"),
            geometry: GeometryBatch::from_geometries(materials.iter().map(|m| m.geometry())),
            n_atoms,
            species,
        }
    }

    pub fn len(&self) -> usize {
        self.n_atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_atoms.is_empty()
    }
}

/// Packed layout of sequences `[shared rows, per-item rows, atom rows]`.
///
/// The source matrix stacks the `n_shared` rows (registers) first, then
/// `n_blocks` blocks of one row per item (block `k`, item `i` at
/// `n_shared + k·B + i`), then every atom row in batch order.
pub struct SequenceLayout {
    pub segs: Segments,
    pub gather: Rc<[usize]>,
    pub owner: Rc<[usize]>,
    /// Packed rows that are not shared rows, in order.
    pub content_rows: Rc<[usize]>,
    /// Segments over `content_rows`.
    pub content_segs: Segments,
    /// Packed row of every atom, in batch order.
    pub atom_rows: Rc<[usize]>,
}

impl SequenceLayout {
    pub fn new(n_atoms: &[usize], n_shared: usize, n_blocks: usize) -> Self {
        let b = n_atoms.len();
        let prefix = n_shared + n_blocks;
        let lens: Vec<usize> = n_atoms.iter().map(|n| n + prefix).collect();
        let segs = Segments::from_lengths(&lens).expect("non-empty sequences");
        let content_lens: Vec<usize> = n_atoms.iter().map(|n| n + n_blocks).collect();
        let content_segs = Segments::from_lengths(&content_lens).expect("non-empty sequences");
        let mut gather = Vec::with_capacity(segs.total_rows());
        let mut content = Vec::with_capacity(content_segs.total_rows());
        let mut atoms = Vec::new();
        let mut atom_src = n_shared + n_blocks * b;
        for (i, &n) in n_atoms.iter().enumerate() {
            gather.extend(0..n_shared);
            content.extend(gather.len()..gather.len() + n_blocks + n);
            gather.extend((0..n_blocks).map(|k| n_shared + k * b + i));
            atoms.extend(gather.len()..gather.len() + n);
            gather.extend(atom_src..atom_src + n);
            atom_src += n;
        }
        let owner = segs.row_owner().into();
        SequenceLayout {
            segs,
            gather: gather.into(),
            owner,
            content_rows: content.into(),
            content_segs,
            atom_rows: atoms.into(),
        }
    }
}

pub fn species_tokens(species: &[AtomType]) -> Vec<usize> {
    species.iter().map(|a| a.0).collect()
}
