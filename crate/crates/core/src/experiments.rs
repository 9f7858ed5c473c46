//! The experiment commands: data generation, training, optimization,
//! reconstruction, interpolation, gradient ablation, timing and evaluation.
//!
//! Every command writes CSV tables (header row, trailing `# config_sha256=`
//! comment) plus a plain-text summary into the output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};

use crate::atom_decoder::DecoderConfig;
use crate::config::{ConfigError, RunConfig};
use crate::crystal::{read_records, write_records, AtomType, CrystalError, Geometry, Material, MaterialRecord, Vocab};
use crate::flow::{fit_length_prior, integrate, FlowConfig, FlowError, Trajectory};
use crate::mbo::{
    decode_species_rows, discover, encode_means, interpolate_clique, interpolate_latent, optimize, top_k_filter, DecayMode,
    DiscoverConfig, EsConfig, GradientSource, MboError, ModelSurrogate, Surrogate,
};
use crate::model::Model;
use crate::rng::{stream, Rng as StreamRng};
use crate::toy::{generate_dataset, oracle, species_oracle, OracleSpec};
use crate::trainer::{load_checkpoint, save_checkpoint, split_indices, CheckpointError, LogRow, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("dataset: {0}")]
    Data(#[from] CrystalError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{0}")]
    Numeric(String),
}

impl ExperimentError {
    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

impl From<MboError> for ExperimentError {
    fn from(e: MboError) -> Self {
        ExperimentError::Numeric(e.to_string())
    }
}

impl From<FlowError> for ExperimentError {
    fn from(e: FlowError) -> Self {
        ExperimentError::Numeric(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Writes tables and summaries, stamping each table with the config hash.
pub struct Output {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl Output {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.paths.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io { path: dir.clone(), source })?;
        Ok(Output { dir, config_hash: cfg.hash() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv<I, R>(&self, name: &str, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let path = self.path(name);
        let io = |source: std::io::Error| ExperimentError::Io { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(e.into()))?;
        w.write_record(header).map_err(|e| io(e.into()))?;
        for r in rows {
            w.write_record(r).map_err(|e| io(e.into()))?;
        }
        let mut inner = w.into_inner().map_err(|e| io(e.into_error()))?;
        writeln!(inner, "# config_sha256={}", self.config_hash).map_err(io)?;
        Ok(path)
    }

    pub fn summary(&self, command: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(&format!("summary_{command}.txt"));
        let body = format!("{text}\nconfig_sha256={}\n", self.config_hash);
        fs::write(&path, body).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

/// Dataset, oracle and seeded split for a run.
pub struct Task {
    pub vocab: Vocab,
    pub spec: OracleSpec,
    pub records: Vec<MaterialRecord>,
    pub train: Vec<MaterialRecord>,
    pub val: Vec<MaterialRecord>,
    pub test: Vec<MaterialRecord>,
}

impl Task {
    /// Reads `paths.dataset` when set, otherwise generates the toy dataset.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let vocab = cfg.model.vocab();
        let spec = cfg.toy.oracle_spec(&vocab, cfg.seed);
        spec.validate(&vocab).map_err(|e| ConfigError::Invalid(e))?;
        let records = match &cfg.paths.dataset {
            Some(p) => read_records(p, &vocab)?,
            None => generate_dataset(cfg.toy.n_records, &cfg.toy, &spec, &vocab, &crate::flow::LengthPrior::default(), cfg.seed),
        };
        Ok(Self::from_records(vocab, spec, records, cfg.seed))
    }

    pub fn from_records(vocab: Vocab, spec: OracleSpec, records: Vec<MaterialRecord>, seed: u64) -> Self {
        let (a, b, c) = split_indices(records.len(), seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
        let (train, val, test) = (pick(&a), pick(&b), pick(&c));
        Task { vocab, spec, records, train, val, test }
    }

    /// The first `n` held-out test records.
    pub fn eval_records(&self, n: usize) -> &[MaterialRecord] {
        &self.test[..n.min(self.test.len())]
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn species_string(s: &[AtomType]) -> String {
    s.iter().map(|a| a.0.to_string()).collect::<Vec<_>>().join(" ")
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(cfg: &RunConfig) -> Result<Task> {
    let out = Output::new(cfg)?;
    let task = Task::prepare(cfg)?;
    let data = out.path("dataset.jsonl");
    write_records(&data, &task.records)?;
    let spec_path = out.path("oracle.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&task.spec).expect("oracle serializes"))
        .map_err(|source| ExperimentError::Io { path: spec_path.clone(), source })?;
    let ys: Vec<f64> = task.records.iter().map(|r| r.property).collect();
    let sizes: Vec<f64> = task.records.iter().map(|r| r.material.n_atoms() as f64).collect();
    out.csv(
        "gen_data.csv",
        &["records", "mean_property", "min_property", "max_property", "mean_atoms"],
        [[
            task.records.len().to_string(),
            f(mean(&ys)),
            f(ys.iter().copied().fold(f64::INFINITY, f64::min)),
            f(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            f(mean(&sizes)),
        ]],
    )?;
    let best = task.spec.optimum().map(|v| format!("\nbest achievable value: {v:.4}")).unwrap_or_default();
    out.summary(
        "gen-data",
        &format!(
            "wrote {} records to {}\nmean property {:.4}{best}",
            task.records.len(),
            data.display(),
            mean(&ys)
        ),
    )?;
    Ok(task)
}

// ------------------------------------------------------------------- train

/// Trains a fresh model on the task's training split.
pub fn train(cfg: &RunConfig, task: &Task, mut on_log: impl FnMut(&LogRow)) -> Result<Trainer> {
    let out = Output::new(cfg)?;
    let prior = fit_length_prior(&task.train)?;
    let model = Model::new(cfg.model.clone(), prior, cfg.seed).map_err(ConfigError::Invalid)?;
    let mut trainer = Trainer::new(model, cfg.training.clone(), cfg.flow.clone(), cfg.seed);
    let mut rows = Vec::new();
    trainer.run(&task.train, &task.val, cfg.training.gradient_steps, |r| {
        on_log(r);
        rows.push(r.clone());
    });
    if rows.iter().any(|r| !r.loss.is_finite()) {
        return Err(ExperimentError::Numeric("training loss became non-finite".into()));
    }
    out.csv(
        "train_log.csv",
        &["step", "loss", "atom", "flow", "pred", "kl", "beta", "tau_pred", "val_loss", "wall_ms"],
        rows.iter().map(|r| {
            [
                r.step.to_string(),
                f(r.loss),
                f(r.atom),
                f(r.flow),
                f(r.pred),
                f(r.kl),
                f(r.beta),
                f(r.tau_pred),
                r.val_loss.map(f).unwrap_or_default(),
                r.wall_ms.to_string(),
            ]
        }),
    )?;
    let ckpt = checkpoint_path(cfg);
    save_checkpoint(&trainer, &ckpt).map_err(|source| ExperimentError::Checkpoint { path: ckpt.clone(), source })?;
    let last = rows.last().cloned();
    out.summary(
        "train",
        &format!(
            "trained {} steps on {} records\nfinal loss {:.4}\nfinal validation loss {:.4}\ncheckpoint {}",
            trainer.step,
            task.train.len(),
            last.as_ref().map(|r| r.loss).unwrap_or(f64::NAN),
            trainer.evaluate(&task.val),
            ckpt.display()
        ),
    )?;
    Ok(trainer)
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint.clone().unwrap_or_else(|| cfg.paths.out_dir.join("model.ckpt"))
}

pub fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path).map(|t| t.model).map_err(|source| ExperimentError::Checkpoint { path: path.to_path_buf(), source })
}

// ------------------------------------------------------------ decode helpers

/// Flow-integrates geometry for decoded species. Trajectory `i` draws from
/// stream `(seed, tag, i)`, so the same index sees the same prior sample at
/// every guidance strength.
pub fn decode_geometry(model: &Model, latents: &Array2<f64>, species: &[Vec<AtomType>], flow: &FlowConfig, seed: u64, tag: &str) -> Result<Vec<Geometry>> {
    let rows: Vec<Vec<f64>> = latents.outer_iter().map(|r| r.to_vec()).collect();
    let trajs: Vec<Trajectory<'_>> = rows.iter().zip(species).map(|(z, s)| Trajectory { latent: z, species: s }).collect();
    let mut rngs: Vec<StreamRng> = (0..rows.len() as u64).map(|i| stream(seed, tag, i)).collect();
    let field = model.flow.bound(&model.params);
    Ok(integrate(&field, &trajs, flow, &model.prior, &mut rngs)?)
}

fn assemble(species: Vec<Vec<AtomType>>, geoms: Vec<Geometry>, vocab: &Vocab) -> Result<Vec<Material>> {
    species
        .into_iter()
        .zip(geoms)
        .map(|(s, g)| Material::new(s, g, vocab).map_err(|e| ExperimentError::Numeric(format!("decoded material: {e}"))))
        .collect()
}

/// Oracle values of decoded latents. Geometry is integrated only when the
/// oracle needs it.
pub fn score_latents(model: &Model, z: &Array2<f64>, spec: &OracleSpec, decoder: &DecoderConfig, flow: &FlowConfig, seed: u64) -> Result<Vec<f64>> {
    let source: Vec<usize> = (0..z.nrows()).collect();
    let species = decode_species_rows(model, z, decoder, &source)?;
    if let Some(v) = species.iter().map(|s| species_oracle(s, spec)).collect::<Option<Vec<f64>>>() {
        return Ok(v);
    }
    let geoms = decode_geometry(model, z, &species, flow, seed, "score-flow")?;
    Ok(assemble(species, geoms, &model.vocab())?.iter().map(|m| oracle(m, spec)).collect())
}

// ------------------------------------------------------------- reconstruct

#[derive(Clone, Debug, PartialEq)]
pub struct ReconRow {
    pub omega: f64,
    pub n: usize,
    /// Species and geometry both agree.
    pub matched: usize,
    pub species_matched: usize,
}

impl ReconRow {
    pub fn match_ratio(&self) -> f64 {
        self.matched as f64 / self.n as f64
    }

    pub fn species_ratio(&self) -> f64 {
        self.species_matched as f64 / self.n as f64
    }
}

/// Geometry agreement: lengths within a relative tolerance, angles within
/// degrees, fractional positions within a periodic distance, atom by atom.
pub fn geometry_matches(a: &Geometry, b: &Geometry, length_rel: f64, angle_deg: f64, pos: f64) -> bool {
    if a.n_atoms() != b.n_atoms() {
        return false;
    }
    let lengths = a.lengths().iter().zip(b.lengths()).all(|(x, y)| (x - y).abs() <= length_rel * x.abs());
    let angles = a.angles().iter().zip(b.angles()).all(|(x, y)| (x - y).abs().to_degrees() <= angle_deg);
    let positions = a.positions().iter().zip(b.positions()).all(|(p, q)| {
        p.iter().zip(q).all(|(x, y)| {
            let d = (x - y).rem_euclid(1.0);
            d.min(1.0 - d) <= pos
        })
    });
    lengths && angles && positions
}

/// Encodes held-out records to their posterior means, decodes them back at
/// each guidance strength and counts exact reconstructions.
pub fn reconstruct(cfg: &RunConfig, model: &Model, records: &[MaterialRecord]) -> Result<Vec<ReconRow>> {
    let out = Output::new(cfg)?;
    let z = encode_means(model, records);
    let source: Vec<usize> = (0..records.len()).collect();
    let species = decode_species_rows(model, &z, &cfg.decoding, &source)?;
    let species_ok: Vec<bool> = species.iter().zip(records).map(|(s, r)| s.as_slice() == r.material.species()).collect();
    let e = &cfg.experiments;
    let mut rows = Vec::new();
    for &omega in &e.omegas {
        let flow = FlowConfig { omega, ..cfg.flow.clone() };
        let geoms = decode_geometry(model, &z, &species, &flow, cfg.seed, "reconstruct-flow")?;
        let matched = (0..records.len())
            .filter(|&i| species_ok[i] && geometry_matches(records[i].material.geometry(), &geoms[i], e.length_rel_tol, e.angle_tol_deg, e.position_tol))
            .count();
        rows.push(ReconRow { omega, n: records.len(), matched, species_matched: species_ok.iter().filter(|&&b| b).count() });
    }
    out.csv(
        "reconstruct.csv",
        &["omega", "n", "matched", "match_ratio", "species_matched", "species_match_ratio"],
        rows.iter().map(|r| [f(r.omega), r.n.to_string(), r.matched.to_string(), f(r.match_ratio()), r.species_matched.to_string(), f(r.species_ratio())]),
    )?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("omega {:>3}: species-exact {:.1}%  species+geometry {:.1}%", r.omega, 100.0 * r.species_ratio(), 100.0 * r.match_ratio()))
        .collect();
    out.summary("reconstruct", &format!("{} held-out records\n{}", records.len(), lines.join("\n")))?;
    Ok(rows)
}

// ---------------------------------------------------------------- optimize

#[derive(Clone, Debug)]
pub struct OptimizeSummary {
    pub n: usize,
    pub initial_oracle: f64,
    pub discovered_oracle: f64,
    pub filtered_oracle: f64,
    pub n_filtered: usize,
    pub initial_predicted: f64,
    pub final_predicted: f64,
}

impl OptimizeSummary {
    /// Relative decrease of the mean oracle value.
    pub fn improvement(&self) -> f64 {
        (self.initial_oracle - self.discovered_oracle) / self.initial_oracle.abs()
    }
}

/// Runs the discovery pipeline on held-out records and scores the designs.
pub fn optimize_designs(cfg: &RunConfig, model: &Model, records: &[MaterialRecord], spec: &OracleSpec) -> Result<OptimizeSummary> {
    let out = Output::new(cfg)?;
    let dc = DiscoverConfig { es: EsConfig { filter: false, ..cfg.es.clone() }, decoder: cfg.decoding, flow: cfg.flow.clone(), seed: cfg.seed };
    let d = discover(model, records, &dc, Some(spec))?;
    let values = d.oracle_values.clone().expect("oracle supplied");
    let kept = top_k_filter(&d.predicted, cfg.es.top_k_percent)?;
    let initial: Vec<f64> = records.iter().map(|r| oracle(&r.material, spec)).collect();
    let summary = OptimizeSummary {
        n: records.len(),
        initial_oracle: mean(&initial),
        discovered_oracle: mean(&values),
        filtered_oracle: mean(&kept.iter().map(|&i| values[i]).collect::<Vec<_>>()),
        n_filtered: kept.len(),
        initial_predicted: mean(&d.optimized.trace.iter().map(|t| t[0]).collect::<Vec<_>>()),
        final_predicted: mean(&d.predicted),
    };
    out.csv(
        "optimize.csv",
        &["record", "initial_oracle", "predicted_start", "predicted_final", "oracle", "top_k", "species"],
        (0..records.len()).map(|i| {
            [
                i.to_string(),
                f(initial[i]),
                f(d.optimized.trace[i][0]),
                f(d.predicted[i]),
                f(values[i]),
                kept.contains(&i).to_string(),
                species_string(d.materials[i].species()),
            ]
        }),
    )?;
    out.csv(
        "optimize_trace.csv",
        &["latent", "step", "predicted", "latent_norm"],
        d.optimized.trace.iter().zip(&d.optimized.norms).enumerate().flat_map(|(i, (t, n))| {
            t.iter().zip(n).enumerate().map(move |(s, (v, nv))| [i.to_string(), s.to_string(), f(*v), f(*nv)])
        }),
    )?;
    out.summary(
        "optimize",
        &format!(
            "{} designs\nmean oracle: initial {:.4}, discovered {:.4} ({:+.1}%)\ntop {}% by prediction ({} designs): {:.4}\nmean prediction: {:.4} -> {:.4}",
            summary.n,
            summary.initial_oracle,
            summary.discovered_oracle,
            -100.0 * summary.improvement(),
            cfg.es.top_k_percent,
            summary.n_filtered,
            summary.filtered_oracle,
            summary.initial_predicted,
            summary.final_predicted
        ),
    )?;
    Ok(summary)
}

// ------------------------------------------------------------- interpolate

#[derive(Clone, Debug)]
pub struct InterpRow {
    /// `None` for the full-latent path.
    pub clique: Option<usize>,
    pub t: f64,
    pub predicted: f64,
    pub oracle: f64,
    pub species: Vec<AtomType>,
}

/// Decodes the straight line between two held-out records, in full and one
/// clique at a time.
pub fn interpolate(cfg: &RunConfig, model: &Model, a: &MaterialRecord, b: &MaterialRecord, spec: &OracleSpec) -> Result<Vec<InterpRow>> {
    let out = Output::new(cfg)?;
    let z = encode_means(model, &[a.clone(), b.clone()]);
    let (z0, z1) = (z.row(0).to_vec(), z.row(1).to_vec());
    let shape = model.shape();
    let steps = cfg.experiments.interp_steps;
    let modes: Vec<Option<usize>> = std::iter::once(None).chain((0..shape.n_cliques()).map(Some)).collect();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for &c in &modes {
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            rows.push(match c {
                None => interpolate_latent(&z0, &z1, t),
                Some(c) => interpolate_clique(&z0, &z1, &shape, c, t),
            });
            labels.push((c, t));
        }
    }
    let zm = Array2::from_shape_fn((rows.len(), z0.len()), |(i, j)| rows[i][j]);
    let predicted = ModelSurrogate { model }.evaluate(&zm);
    let source: Vec<usize> = (0..rows.len()).collect();
    let species = decode_species_rows(model, &zm, &cfg.decoding, &source)?;
    let geoms = decode_geometry(model, &zm, &species, &cfg.flow, cfg.seed, "interpolate-flow")?;
    let materials = assemble(species, geoms, &model.vocab())?;
    let result: Vec<InterpRow> = labels
        .iter()
        .zip(&materials)
        .zip(&predicted)
        .map(|((&(clique, t), m), &p)| InterpRow { clique, t, predicted: p, oracle: oracle(m, spec), species: m.species().to_vec() })
        .collect();
    out.csv(
        "interpolate.csv",
        &["mode", "clique", "t", "predicted", "oracle", "n_atoms", "species"],
        result.iter().map(|r| {
            [
                if r.clique.is_some() { "clique" } else { "full" }.to_string(),
                r.clique.map(|c| c.to_string()).unwrap_or_default(),
                f(r.t),
                f(r.predicted),
                f(r.oracle),
                r.species.len().to_string(),
                species_string(&r.species),
            ]
        }),
    )?;
    let full: Vec<&InterpRow> = result.iter().filter(|r| r.clique.is_none()).collect();
    out.summary(
        "interpolate",
        &format!(
            "{} grid points per path, {} paths\nfull path predicted {:.4} -> {:.4}, oracle {:.4} -> {:.4}",
            steps + 1,
            modes.len(),
            full[0].predicted,
            full[full.len() - 1].predicted,
            full[0].oracle,
            full[full.len() - 1].oracle
        ),
    )?;
    Ok(result)
}

// ---------------------------------------------------------- ablate-gradients

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub decay: f64,
    pub predicted_change: f64,
    pub oracle_change: f64,
}

/// Mean change of prediction and of decoded oracle value for back-propagated
/// and evolution-strategy gradients, with and without weight decay, plus a
/// decay sweep for ES. Changes are relative to decoding the starting latents.
pub fn ablate_gradients(cfg: &RunConfig, model: &Model, records: &[MaterialRecord], spec: &OracleSpec) -> Result<Vec<AblationRow>> {
    let out = Output::new(cfg)?;
    let start = encode_means(model, records);
    let surrogate = ModelSurrogate { model };
    let base_pred = mean(&surrogate.evaluate(&start));
    let base_oracle = mean(&score_latents(model, &start, spec, &cfg.decoding, &cfg.flow, cfg.seed)?);
    let with_decay = cfg.es.decay;
    let mut runs: Vec<(String, GradientSource, f64)> = vec![
        ("BP".into(), GradientSource::Bp, 0.0),
        ("BP+W".into(), GradientSource::Bp, with_decay),
        ("ES".into(), GradientSource::Es, 0.0),
        ("ES+W".into(), GradientSource::Es, with_decay),
    ];
    for &lam in &cfg.experiments.decay_sweep {
        runs.push(("ES-sweep".into(), GradientSource::Es, lam));
    }
    let mut rows = Vec::new();
    for (method, algorithm, decay) in runs {
        let es = EsConfig { algorithm, decay, decay_mode: DecayMode::Decoupled, ..cfg.es.clone() };
        let opt = optimize(&start, &surrogate, &es, cfg.seed)?;
        let o = score_latents(model, &opt.latents, spec, &cfg.decoding, &cfg.flow, cfg.seed)?;
        rows.push(AblationRow { method, decay, predicted_change: mean(&opt.final_values()) - base_pred, oracle_change: mean(&o) - base_oracle });
    }
    out.csv(
        "ablate_gradients.csv",
        &["method", "decay", "predicted_change", "oracle_change"],
        rows.iter().map(|r| [r.method.clone(), f(r.decay), f(r.predicted_change), f(r.oracle_change)]),
    )?;
    let lines: Vec<String> =
        rows.iter().map(|r| format!("{:<9} λ={:<4} prediction {:+.4}  oracle {:+.4}", r.method, r.decay, r.predicted_change, r.oracle_change)).collect();
    out.summary(
        "ablate-gradients",
        &format!("{} latents, {} steps; starting decoded oracle mean {:.4}\n{}", records.len(), cfg.es.design_steps, base_oracle, lines.join("\n")),
    )?;
    Ok(rows)
}

// ------------------------------------------------------------------ timing

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub mbo_seconds: f64,
    pub decode_seconds: f64,
}

/// Wall-clock seconds of the optimization phase and the decoding phase for
/// growing numbers of designs.
pub fn timing(cfg: &RunConfig, model: &Model, records: &[MaterialRecord]) -> Result<Vec<TimingRow>> {
    let out = Output::new(cfg)?;
    if records.is_empty() {
        return Err(ExperimentError::Numeric("timing needs at least one record".into()));
    }
    let pool = encode_means(model, records);
    let surrogate = ModelSurrogate { model };
    let mut rows = Vec::new();
    for &n in &cfg.experiments.timing_sizes {
        let idx: Vec<usize> = (0..n).map(|i| i % pool.nrows()).collect();
        let start = pool.select(Axis(0), &idx);
        let t0 = Instant::now();
        let opt = optimize(&start, &surrogate, &cfg.es, cfg.seed)?;
        let mbo_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let species = decode_species_rows(model, &opt.latents, &cfg.decoding, &idx)?;
        decode_geometry(model, &opt.latents, &species, &cfg.flow, cfg.seed, "timing-flow")?;
        rows.push(TimingRow { n, mbo_seconds, decode_seconds: t1.elapsed().as_secs_f64() });
    }
    out.csv("timing.csv", &["n", "mbo_seconds", "decode_seconds"], rows.iter().map(|r| [r.n.to_string(), f(r.mbo_seconds), f(r.decode_seconds)]))?;
    let lines: Vec<String> = rows.iter().map(|r| format!("N={:<5} mbo {:.2}s  decode {:.2}s", r.n, r.mbo_seconds, r.decode_seconds)).collect();
    out.summary(
        "timing",
        &format!(
            "{} design steps, N_step {}, {} threads\n{}",
            cfg.es.design_steps,
            cfg.flow.n_step,
            rayon::current_num_threads(),
            lines.join("\n")
        ),
    )?;
    Ok(rows)
}

// -------------------------------------------------------------------- eval

/// Held-out loss, surrogate accuracy and species reconstruction rate.
pub fn eval(cfg: &RunConfig, trainer: &Trainer, records: &[MaterialRecord]) -> Result<Vec<(String, f64)>> {
    let out = Output::new(cfg)?;
    let model = &trainer.model;
    let z = encode_means(model, records);
    let pred = ModelSurrogate { model }.evaluate(&z);
    let ys: Vec<f64> = records.iter().map(|r| r.property).collect();
    let mse = pred.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / ys.len() as f64;
    let (mp, my) = (mean(&pred), mean(&ys));
    let cov: f64 = pred.iter().zip(&ys).map(|(p, y)| (p - mp) * (y - my)).sum();
    let sp = pred.iter().map(|p| (p - mp).powi(2)).sum::<f64>().sqrt();
    let sy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>().sqrt();
    let source: Vec<usize> = (0..records.len()).collect();
    let species = decode_species_rows(model, &z, &cfg.decoding, &source)?;
    let exact = species.iter().zip(records).filter(|(s, r)| s.as_slice() == r.material.species()).count();
    let metrics = vec![
        ("records".to_string(), records.len() as f64),
        ("loss".to_string(), trainer.evaluate(records)),
        ("predictor_mse".to_string(), mse),
        ("predictor_pearson".to_string(), cov / (sp * sy)),
        ("species_exact_ratio".to_string(), exact as f64 / records.len() as f64),
    ];
    out.csv("eval.csv", &["metric", "value"], metrics.iter().map(|(k, v)| [k.clone(), f(*v)]))?;
    let text: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}: {v:.4}")).collect();
    out.summary("eval", &text.join("\n"))?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn geometry_match_uses_periodic_positions() {
        let a = Geometry::new([1.0; 3], [FRAC_PI_2; 3], vec![[0.01, 0.5, 0.99]]).unwrap();
        let b = Geometry::new([1.01; 3], [FRAC_PI_2 + 0.01; 3], vec![[0.98, 0.52, 0.02]]).unwrap();
        assert!(geometry_matches(&a, &b, 0.02, 2.0, 0.05));
        let c = Geometry::new([1.05; 3], [FRAC_PI_2; 3], vec![[0.01, 0.5, 0.99]]).unwrap();
        assert!(!geometry_matches(&a, &c, 0.02, 2.0, 0.05));
    }

    #[test]
    fn csv_tables_end_with_the_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out_dir = dir.path().to_path_buf();
        let out = Output::new(&cfg).unwrap();
        let p = out.csv("t.csv", &["a", "b"], [["1", "2"]]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "a,b");
        assert_eq!(lines.last().unwrap(), &format!("# config_sha256={}", cfg.hash()));
    }

    #[test]
    fn reconstruct_contract_on_an_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out_dir = dir.path().to_path_buf();
        cfg.toy.n_records = 30;
        cfg.flow.n_step = 3;
        cfg.model.transformer_dim = 16;
        cfg.model.mlp_dim = 16;
        cfg.model.n_blocks = 1;
        let task = Task::prepare(&cfg).unwrap();
        let model = Model::new(cfg.model.clone(), crate::flow::LengthPrior::default(), 0).unwrap();
        let rows = reconstruct(&cfg, &model, task.eval_records(4)).unwrap();
        assert_eq!(rows.len(), 3);
        let text = fs::read_to_string(dir.path().join("reconstruct.csv")).unwrap();
        assert!(text.starts_with("omega,n,matched,match_ratio"));
        assert!(rows.iter().all(|r| r.matched <= r.species_matched && r.n == 4));
    }
}
