//! Materials: species sequences plus unit-cell geometry, with the cell volume
//! and density math and the JSON Lines record format.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

/// Species vocabulary size used unless configured otherwise.
pub const DEFAULT_VOCAB: usize = 16;
/// Largest number of atoms in a unit cell.
pub const DEFAULT_N_MAX: usize = 20;

const MIN_RADICAND: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum CrystalError {
    #[error("degenerate cell: volume radicand {0:e} is not positive")]
    DegenerateCell(f64),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error("line {line}: invariant violated: {message}")]
    RecordInvariant { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invariant(msg: impl Into<String>) -> CrystalError {
    CrystalError::Invariant(msg.into())
}

/// Token ids: species `0..V`, then Start, Stop and Pad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AtomType(pub usize);

impl fmt::Display for AtomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Species vocabulary and atom-count limit for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub species: usize,
    pub n_max: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { species: DEFAULT_VOCAB, n_max: DEFAULT_N_MAX }
    }
}

impl Vocab {
    pub fn new(species: usize, n_max: usize) -> Self {
        Vocab { species, n_max }
    }

    pub fn start(&self) -> AtomType {
        AtomType(self.species)
    }

    pub fn stop(&self) -> AtomType {
        AtomType(self.species + 1)
    }

    pub fn pad(&self) -> AtomType {
        AtomType(self.species + 2)
    }

    /// Number of token ids including the three special tokens.
    pub fn n_tokens(&self) -> usize {
        self.species + 3
    }

    pub fn is_species(&self, a: AtomType) -> bool {
        a.0 < self.species
    }
}

/// Unit-cell lengths and angles (radians) plus fractional positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    lengths: [f64; 3],
    angles: [f64; 3],
    positions: Vec<[f64; 3]>,
}

impl Geometry {
    pub fn new(lengths: [f64; 3], angles: [f64; 3], positions: Vec<[f64; 3]>) -> Result<Self, CrystalError> {
        if let Some(l) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(invariant(format!("cell length {l} must be positive and finite")));
        }
        if let Some(a) = angles.iter().find(|a| !(**a > 0.0 && **a < std::f64::consts::PI)) {
            return Err(invariant(format!("cell angle {a} rad must lie strictly inside (0, pi)")));
        }
        for (i, p) in positions.iter().enumerate() {
            if let Some(x) = p.iter().find(|x| !(**x >= 0.0 && **x < 1.0)) {
                return Err(invariant(format!("fractional coordinate {x} of atom {i} must lie in [0, 1)")));
            }
        }
        Ok(Geometry { lengths, angles, positions })
    }

    pub fn lengths(&self) -> [f64; 3] {
        self.lengths
    }

    pub fn angles(&self) -> [f64; 3] {
        self.angles
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }
}

/// A design: species sequence and its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    species: Vec<AtomType>,
    geometry: Geometry,
}

impl Material {
    pub fn new(species: Vec<AtomType>, geometry: Geometry, vocab: &Vocab) -> Result<Self, CrystalError> {
        if species.is_empty() || species.len() > vocab.n_max {
            return Err(invariant(format!("atom count {} outside [1, {}]", species.len(), vocab.n_max)));
        }
        if let Some(a) = species.iter().find(|a| !vocab.is_species(**a)) {
            return Err(invariant(format!("token {a} is not a species id (vocabulary {})", vocab.species)));
        }
        if geometry.n_atoms() != species.len() {
            return Err(invariant(format!(
                "{} positions for {} atoms",
                geometry.n_atoms(),
                species.len()
            )));
        }
        Ok(Material { species, geometry })
    }

    pub fn species(&self) -> &[AtomType] {
        &self.species
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }
}

/// A material with its scalar property value.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialRecord {
    pub material: Material,
    pub property: f64,
}

impl MaterialRecord {
    pub fn new(material: Material, property: f64) -> Result<Self, CrystalError> {
        if !property.is_finite() {
            return Err(invariant(format!("property {property} is not finite")));
        }
        Ok(MaterialRecord { material, property })
    }
}

/// Factor `sqrt(1 - cos²α - cos²β - cos²γ + 2 cosα cosβ cosγ)` of the cell volume.
pub fn angular_factor(angles: [f64; 3]) -> Result<f64, CrystalError> {
    let [ca, cb, cg] = angles.map(f64::cos);
    let radicand = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
    if radicand <= MIN_RADICAND {
        return Err(CrystalError::DegenerateCell(radicand));
    }
    Ok(radicand.sqrt())
}

pub fn volume(g: &Geometry) -> Result<f64, CrystalError> {
    let [a, b, c] = g.lengths;
    Ok(a * b * c * angular_factor(g.angles)?)
}

/// Atoms per unit volume.
pub fn density(m: &Material) -> Result<f64, CrystalError> {
    Ok(m.n_atoms() as f64 / volume(&m.geometry)?)
}

/// Lengths divided by the cube root of the atom count.
pub fn canonicalize_lengths(lengths: [f64; 3], n_atom: usize) -> [f64; 3] {
    let s = (n_atom as f64).cbrt();
    lengths.map(|l| l / s)
}

pub fn decanonicalize_lengths(canonical: [f64; 3], n_atom: usize) -> [f64; 3] {
    let s = (n_atom as f64).cbrt();
    canonical.map(|l| l * s)
}

fn field<'v>(obj: &'v Value, line: usize, name: &str) -> Result<&'v Value, CrystalError> {
    obj.get(name).ok_or_else(|| CrystalError::Parse { line, field: name.into(), message: "missing".into() })
}

fn parse_err(line: usize, name: &str, message: impl Into<String>) -> CrystalError {
    CrystalError::Parse { line, field: name.into(), message: message.into() }
}

fn real_triple(v: &Value, line: usize, name: &str) -> Result<[f64; 3], CrystalError> {
    let arr = v.as_array().ok_or_else(|| parse_err(line, name, "expected an array of 3 numbers"))?;
    if arr.len() != 3 {
        return Err(parse_err(line, name, format!("expected 3 numbers, found {}", arr.len())));
    }
    let mut out = [0.0; 3];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().ok_or_else(|| parse_err(line, name, format!("`{x}` is not a number")))?;
    }
    Ok(out)
}

fn parse_line(text: &str, line: usize, vocab: &Vocab) -> Result<MaterialRecord, CrystalError> {
    let obj: Value = serde_json::from_str(text).map_err(|e| parse_err(line, "<record>", e.to_string()))?;
    let map = obj.as_object().ok_or_else(|| parse_err(line, "<record>", "expected a JSON object"))?;
    const FIELDS: [&str; 5] = ["lengths", "angles_deg", "species", "frac_coords", "property"];
    if let Some(k) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(parse_err(line, k, "unknown field"));
    }
    let lengths = real_triple(field(&obj, line, "lengths")?, line, "lengths")?;
    let angles_deg = real_triple(field(&obj, line, "angles_deg")?, line, "angles_deg")?;
    let species_v = field(&obj, line, "species")?
        .as_array()
        .ok_or_else(|| parse_err(line, "species", "expected an array of integers"))?;
    let species = species_v
        .iter()
        .map(|s| {
            s.as_u64().map(|u| AtomType(u as usize)).ok_or_else(|| parse_err(line, "species", format!("`{s}` is not a non-negative integer")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let coords_v = field(&obj, line, "frac_coords")?
        .as_array()
        .ok_or_else(|| parse_err(line, "frac_coords", "expected an array of coordinate triples"))?;
    let positions = coords_v.iter().map(|p| real_triple(p, line, "frac_coords")).collect::<Result<Vec<_>, _>>()?;
    let property = field(&obj, line, "property")?
        .as_f64()
        .ok_or_else(|| parse_err(line, "property", "expected a number"))?;

    let to_record = || -> Result<MaterialRecord, CrystalError> {
        let geometry = Geometry::new(lengths, angles_deg.map(f64::to_radians), positions)?;
        let material = Material::new(species, geometry, vocab)?;
        MaterialRecord::new(material, property)
    };
    to_record().map_err(|e| match e {
        CrystalError::Invariant(message) => CrystalError::RecordInvariant { line, message },
        other => other,
    })
}

/// Reads a JSON Lines dataset. Blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<MaterialRecord>, CrystalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1, vocab)?);
    }
    Ok(out)
}

pub fn record_to_json(r: &MaterialRecord) -> Value {
    let g = r.material.geometry();
    json!({
        "lengths": g.lengths(),
        "angles_deg": g.angles().map(f64::to_degrees),
        "species": r.material.species().iter().map(|a| a.0).collect::<Vec<_>>(),
        "frac_coords": g.positions(),
        "property": r.property,
    })
}

pub fn write_records(path: impl AsRef<Path>, records: &[MaterialRecord]) -> Result<(), CrystalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &record_to_json(r)).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
