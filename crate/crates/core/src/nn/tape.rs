//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept on
//! the tape so [`Tape::backward`] can replay the graph in reverse and return
//! exact gradients for parameters and for any tracked input.
//!
//! Sequences of different lengths are packed row-wise into one matrix and
//! described by [`Segments`]; attention and pooling act within a segment
//! only, so no padding rows ever exist.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::NnError;
use crate::clique::CliqueShape;

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Row layout of a packed batch of sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    spans: Rc<[Span]>,
    total: usize,
}

impl Segments {
    /// Packs sequences of the given lengths back to back.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self, NnError> {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            if len == 0 {
                return Err(NnError::EmptySequence);
            }
            spans.push(Span { start, len });
            start += len;
        }
        Ok(Segments { spans: spans.into(), total: start })
    }

    /// `count` sequences of identical length.
    pub fn uniform(count: usize, len: usize) -> Result<Self, NnError> {
        Self::from_lengths(&vec![len; count])
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn span(&self, i: usize) -> Span {
        self.spans[i]
    }

    /// Segment index of every row.
    pub fn row_owner(&self) -> Vec<usize> {
        let mut owner = Vec::with_capacity(self.total);
        for (i, sp) in self.spans.iter().enumerate() {
            owner.extend(std::iter::repeat_n(i, sp.len));
        }
        owner
    }
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    q_segs: Segments,
    kv_segs: Segments,
    heads: usize,
    // softmax probabilities per (segment, head), before dropout
    probs: Vec<Mat>,
    // dropout keep-masks (already scaled by 1/(1-p)), if dropout was applied
    drop: Option<Vec<Mat>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// Input and the elementwise derivative, kept only when tracked.
    Gelu(Var, Option<Mat>),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Modulate { x: Var, scale: Var, shift: Var, owner: Rc<[usize]> },
    Gather { x: Var, idx: Rc<[usize]> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Attention(Box<AttnCache>),
    SegmentSum { x: Var, segs: Segments },
    SegmentMean { x: Var, segs: Segments },
    SumAll(Var),
    LogSoftmax { x: Var, masked: Option<Rc<[bool]>> },
    PickCols { x: Var, idx: Rc<[usize]> },
    Dropout { x: Var, mask: Mat },
    Chain { z: Var, shape: CliqueShape },
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Dropout settings for a training-mode tape.
struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutCtx>,
    frozen: bool,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient with respect to a parameter; `None` if the parameter was unused.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                store.grad_mut(ParamId::from_index(i)).scaled_add(1.0, g);
            }
        }
    }
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn add_view_into(slot: &mut Option<Mat>, g: ArrayView2<'_, f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = gelu_cdf(x);
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'a> Tape<'a> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new(store: &'a ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), param_vars: vec![None; store.len()], dropout: None, frozen: false }
    }

    /// Forward-only tape: parameters load as constants, so nothing caches
    /// derivatives unless an input is tracked. Values match [`Tape::new`].
    pub fn inference(store: &'a ParamStore) -> Self {
        Tape { frozen: true, ..Self::new(store) }
    }

    /// Training-mode tape applying dropout at `rate` with masks drawn from `rng`.
    pub fn training(store: &'a ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        let mut t = Self::new(store);
        if rate > 0.0 {
            t.dropout = Some(DropoutCtx { rate, rng });
        }
        t
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient will be reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id), !self.frozen);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tr = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tr)
    }

    /// `x + row`, broadcasting a 1×m row over every row of x.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: expected a row vector");
        let value = self.value(x) + self.value(row);
        let tr = self.tracked(x) || self.tracked(row);
        self.push(value, Op::AddRow(x, row), tr)
    }

    /// `x ⊙ row`, broadcasting a 1×m row over every row of x.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row: expected a row vector");
        let value = self.value(x) * self.value(row);
        let tr = self.tracked(x) || self.tracked(row);
        self.push(value, Op::MulRow(x, row), tr)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let tr = self.tracked(x);
        self.push(value, Op::Scale(x, c), tr)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        let tr = self.tracked(x);
        self.push(value, Op::AddConst(x), tr)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tr = self.tracked(x);
        let xv = self.value(x);
        if !tr {
            let value = xv.mapv(|x| x * gelu_cdf(x));
            return self.push(value, Op::Gelu(x, None), tr);
        }
        let mut value = Mat::zeros(xv.dim());
        let mut deriv = Mat::zeros(xv.dim());
        ndarray::Zip::from(&mut value).and(&mut deriv).and(xv).for_each(|v, d, &x| {
            let cdf = gelu_cdf(x);
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            *v = x * cdf;
            *d = cdf + x * pdf;
        });
        self.push(value, Op::Gelu(x, Some(deriv)), tr)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let tr = self.tracked(x);
        self.push(value, Op::Exp(x), tr)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let tr = self.tracked(x);
        self.push(value, Op::Square(x), tr)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        let tr = self.tracked(x);
        self.push(value, Op::Clamp(x, lo, hi), tr)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let tr = self.tracked(x);
        self.push(out, Op::LayerNorm { x, inv_std }, tr)
    }

    /// Row-wise modulation `x ⊙ (1 + scale[owner]) + shift[owner]`, where
    /// `scale`/`shift` hold one row per conditioning group.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var, owner: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let sv = self.value(scale);
        let bv = self.value(shift);
        assert_eq!(xv.nrows(), owner.len(), "modulate: owner length mismatch");
        assert_eq!(sv.dim(), bv.dim(), "modulate: scale/shift shape mismatch");
        assert_eq!(xv.ncols(), sv.ncols(), "modulate: width mismatch");
        let mut out = xv.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let o = owner[i];
            Zip::from(&mut row).and(sv.row(o)).and(bv.row(o)).for_each(|r, &sc, &sh| {
                *r = *r * (1.0 + sc) + sh;
            });
        }
        let tr = self.tracked(x) || self.tracked(scale) || self.tracked(shift);
        self.push(out, Op::Modulate { x, scale, shift, owner }, tr)
    }

    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((idx.len(), xv.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(j));
        }
        let tr = self.tracked(x);
        self.push(out, Op::Gather { x, idx }, tr)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row count mismatch");
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tr)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tr)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        let tr = self.tracked(x);
        self.push(value, Op::SliceCols { x, start }, tr)
    }

    /// Sum of rows within each segment: (total × m) → (segments × m).
    pub fn segment_sum(&mut self, x: Var, segs: &Segments) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segs.total_rows(), "segment_sum: row mismatch");
        let mut out = Mat::zeros((segs.len(), xv.ncols()));
        for (i, sp) in segs.spans().iter().enumerate() {
            out.row_mut(i).assign(&xv.slice(s![sp.start..sp.start + sp.len, ..]).sum_axis(Axis(0)));
        }
        let tr = self.tracked(x);
        self.push(out, Op::SegmentSum { x, segs: segs.clone() }, tr)
    }

    /// Mean of rows within each segment.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segs.total_rows(), "segment_mean: row mismatch");
        let mut out = Mat::zeros((segs.len(), xv.ncols()));
        for (i, sp) in segs.spans().iter().enumerate() {
            let sum = xv.slice(s![sp.start..sp.start + sp.len, ..]).sum_axis(Axis(0));
            out.row_mut(i).assign(&(sum / sp.len as f64));
        }
        let tr = self.tracked(x);
        self.push(out, Op::SegmentMean { x, segs: segs.clone() }, tr)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let tr = self.tracked(x);
        self.push(value, Op::SumAll(x), tr)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise log-softmax. Columns flagged in `masked` get `-inf` and no mass.
    pub fn log_softmax(&mut self, x: Var, masked: Option<Rc<[bool]>>) -> Var {
        let xv = self.value(x);
        if let Some(m) = &masked {
            assert_eq!(m.len(), xv.ncols(), "log_softmax: mask width mismatch");
        }
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let allowed = |j: usize| masked.as_ref().is_none_or(|m| !m[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    sum += (v - max).exp();
                }
            }
            let lse = max + sum.ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if allowed(j) { *v - lse } else { f64::NEG_INFINITY };
            }
        }
        let tr = self.tracked(x);
        self.push(out, Op::LogSoftmax { x, masked }, tr)
    }

    /// Picks one column per row: (n × m) → (n × 1).
    pub fn pick_cols(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), idx.len(), "pick_cols: index count mismatch");
        let out = Mat::from_shape_fn((idx.len(), 1), |(i, _)| xv[[i, idx[i]]]);
        let tr = self.tracked(x);
        self.push(out, Op::PickCols { x, idx }, tr)
    }

    /// Inverted dropout; identity on evaluation tapes.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(ctx) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - ctx.rate;
        let dim = self.nodes[x.0].value.dim();
        let mask = Mat::from_shape_simple_fn(dim, || if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let value = self.value(x) * &mask;
        let tr = self.tracked(x);
        self.push(value, Op::Dropout { x, mask }, tr)
    }

    /// Reshapes flat latents (batch × d_z) into stacked clique rows
    /// (batch·n_cliques × d_clique); knot coordinates are shared.
    pub fn chain(&mut self, z: Var, shape: CliqueShape) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.ncols(), shape.d_z(), "chain: latent width mismatch");
        let (b, c, dc) = (zv.nrows(), shape.n_cliques(), shape.d_clique());
        let stride = shape.stride();
        let mut out = Mat::zeros((b * c, dc));
        for i in 0..b {
            for k in 0..c {
                out.row_mut(i * c + k).assign(&zv.slice(s![i, k * stride..k * stride + dc]));
            }
        }
        let tr = self.tracked(z);
        self.push(out, Op::Chain { z, shape }, tr)
    }

    /// Multi-head scaled dot-product attention between packed query rows and
    /// packed key/value rows. Segment `i` of the queries attends only to
    /// segment `i` of the keys. Inputs are already projected; heads split
    /// the column dimension evenly. With `dropout` set, a training tape drops
    /// attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &Segments,
        kv_segs: &Segments,
        heads: usize,
        causal: bool,
        dropout: bool,
    ) -> Var {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d, "attention: key width mismatch");
        assert_eq!(vv.ncols(), d, "attention: value width mismatch");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert_eq!(q_segs.len(), kv_segs.len(), "attention: segment count mismatch");
        assert_eq!(qv.nrows(), q_segs.total_rows(), "attention: query rows mismatch");
        assert_eq!(kv.nrows(), kv_segs.total_rows(), "attention: key rows mismatch");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_segs.len() * heads);
        let mut drop_ctx = if dropout { self.dropout.as_mut() } else { None };
        let mut drops = drop_ctx.as_ref().map(|_| Vec::with_capacity(q_segs.len() * heads));
        for (qs, ks) in q_segs.spans().iter().zip(kv_segs.spans()) {
            if causal {
                assert_eq!(qs.len, ks.len, "attention: causal mask needs square segments");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![qs.start..qs.start + qs.len, cols.clone()]);
                let kb = kv.slice(s![ks.start..ks.start + ks.len, cols.clone()]);
                let vb = vv.slice(s![ks.start..ks.start + ks.len, cols.clone()]);
                let mut p = qb.dot(&kb.t()) * scale;
                softmax_rows_inplace(&mut p, causal);
                let o = match (&mut drops, drop_ctx.as_mut()) {
                    (Some(list), Some(ctx)) => {
                        let keep = 1.0 - ctx.rate;
                        let m = Mat::from_shape_simple_fn(p.dim(), || {
                            if ctx.rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let o = (&p * &m).dot(&vb);
                        list.push(m);
                        o
                    }
                    _ => p.dot(&vb),
                };
                out.slice_mut(s![qs.start..qs.start + qs.len, cols]).assign(&o);
                probs.push(p);
            }
        }
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        let cache = AttnCache {
            q,
            k,
            v,
            q_segs: q_segs.clone(),
            kv_segs: kv_segs.clone(),
            heads,
            probs,
            drop: drops,
        };
        self.push(out, Op::Attention(Box::new(cache)), tr)
    }

    /// Runs reverse-mode differentiation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::NoGraph);
        }
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoGraph);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(NnError::ShapeMismatch(format!("backward needs a 1x1 loss, got {:?}", lv.dim())));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut params: Vec<Option<Mat>> = (0..self.store.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>], params: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => add_into(&mut params[id.index()], g.clone()),
            Op::MatMul(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.dot(&val(*b).t()));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    add_into(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], g * val(*b));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g * val(*a));
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    add_into(&mut grads[x.0], g.clone());
                }
                if want(*row) {
                    add_into(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if want(*x) {
                    add_into(&mut grads[x.0], g * val(*row));
                }
                if want(*row) {
                    add_into(&mut grads[row.0], (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => add_into(&mut grads[x.0], g * *c),
            Op::AddConst(x) => add_into(&mut grads[x.0], g.clone()),
            Op::Gelu(x, deriv) => {
                let mut d = match deriv {
                    Some(d) => d.clone(),
                    None => val(*x).mapv(gelu_grad),
                };
                d *= g;
                add_into(&mut grads[x.0], d);
            }
            Op::Exp(x) => add_into(&mut grads[x.0], g * &node.value),
            Op::Square(x) => add_into(&mut grads[x.0], g * val(*x) * 2.0),
            Op::Clamp(x, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    if v < *lo || v > *hi {
                        *d = 0.0;
                    }
                });
                add_into(&mut grads[x.0], d);
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &node.value;
                let n = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let sum_g = gr.sum();
                    let sum_gx = gr.dot(&xr);
                    let is = inv_std[i];
                    Zip::from(&mut row).and(&gr).and(&xr).for_each(|d, &gv, &xv| {
                        *d = is / n * (n * gv - sum_g - xv * sum_gx);
                    });
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Modulate { x, scale, shift, owner } => {
                let sv = val(*scale);
                if want(*x) {
                    let mut dx = g.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        Zip::from(&mut row).and(sv.row(owner[i])).for_each(|d, &sc| *d *= 1.0 + sc);
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if want(*scale) {
                    let xv = val(*x);
                    let mut ds = Mat::zeros(sv.dim());
                    for i in 0..g.nrows() {
                        let mut r = ds.row_mut(owner[i]);
                        Zip::from(&mut r).and(g.row(i)).and(xv.row(i)).for_each(|d, &gv, &xv| *d += gv * xv);
                    }
                    add_into(&mut grads[scale.0], ds);
                }
                if want(*shift) {
                    let mut db = Mat::zeros(sv.dim());
                    for i in 0..g.nrows() {
                        let mut r = db.row_mut(owner[i]);
                        r += &g.row(i);
                    }
                    add_into(&mut grads[shift.0], db);
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = Mat::zeros(val(*x).dim());
                for (i, &j) in idx.iter().enumerate() {
                    let mut r = dx.row_mut(j);
                    r += &g.row(i);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if want(*p) {
                        add_view_into(&mut grads[p.0], g.slice(s![.., c..c + w]));
                    }
                    c += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if want(*p) {
                        add_view_into(&mut grads[p.0], g.slice(s![r..r + h, ..]));
                    }
                    r += h;
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = Mat::zeros(val(*x).dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                add_into(&mut grads[x.0], dx);
            }
            Op::SegmentSum { x, segs } => {
                let mut dx = Mat::zeros(val(*x).dim());
                for (i, sp) in segs.spans().iter().enumerate() {
                    let mut blk = dx.slice_mut(s![sp.start..sp.start + sp.len, ..]);
                    blk += &g.row(i);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::SegmentMean { x, segs } => {
                let mut dx = Mat::zeros(val(*x).dim());
                for (i, sp) in segs.spans().iter().enumerate() {
                    let mut blk = dx.slice_mut(s![sp.start..sp.start + sp.len, ..]);
                    blk += &(&g.row(i) / sp.len as f64);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => add_into(&mut grads[x.0], Mat::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::LogSoftmax { x, masked } => {
                let out = &node.value;
                let mut dx = Mat::zeros(out.dim());
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let gr = g.row(i);
                    let or = out.row(i);
                    let allowed = |j: usize| masked.as_ref().is_none_or(|m| !m[j]);
                    let gsum: f64 = gr.iter().enumerate().filter(|(j, _)| allowed(*j)).map(|(_, v)| v).sum();
                    for j in 0..row.len() {
                        if allowed(j) {
                            row[j] = gr[j] - or[j].exp() * gsum;
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::PickCols { x, idx } => {
                let mut dx = Mat::zeros(val(*x).dim());
                for (i, &j) in idx.iter().enumerate() {
                    dx[[i, j]] = g[[i, 0]];
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Dropout { x, mask } => add_into(&mut grads[x.0], g * mask),
            Op::Chain { z, shape } => {
                let zv = val(*z);
                let (c, dc, stride) = (shape.n_cliques(), shape.d_clique(), shape.stride());
                let mut dz = Mat::zeros(zv.dim());
                for i in 0..zv.nrows() {
                    for k in 0..c {
                        let mut dst = dz.slice_mut(s![i, k * stride..k * stride + dc]);
                        dst += &g.row(i * c + k);
                    }
                }
                add_into(&mut grads[z.0], dz);
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
        }
    }

    fn backprop_attention(&self, c: &AttnCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let qv = &self.nodes[c.q.0].value;
        let kv = &self.nodes[c.k.0].value;
        let vv = &self.nodes[c.v.0].value;
        let d = qv.ncols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        let mut slot = 0;
        for (qs, ks) in c.q_segs.spans().iter().zip(c.kv_segs.spans()) {
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                let qr = qs.start..qs.start + qs.len;
                let kr = ks.start..ks.start + ks.len;
                let p = &c.probs[slot];
                let go = g.slice(s![qr.clone(), cols.clone()]);
                let vb = vv.slice(s![kr.clone(), cols.clone()]);
                let (p_used, mask) = match &c.drop {
                    Some(m) => (p * &m[slot], Some(&m[slot])),
                    None => (p.clone(), None),
                };
                // dV = P'^T dO
                let mut dvb = dv.slice_mut(s![kr.clone(), cols.clone()]);
                dvb += &p_used.t().dot(&go);
                // dP = (dO V^T) ⊙ mask
                let mut dp = go.dot(&vb.t());
                if let Some(m) = mask {
                    dp *= m;
                }
                // softmax backward
                for (mut dr, pr) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot = dr.dot(&pr);
                    Zip::from(&mut dr).and(&pr).for_each(|d, &pv| *d = pv * (*d - dot));
                }
                dp *= scale;
                let kb = kv.slice(s![kr.clone(), cols.clone()]);
                let qb = qv.slice(s![qr.clone(), cols.clone()]);
                let mut dqb = dq.slice_mut(s![qr, cols.clone()]);
                dqb += &dp.dot(&kb);
                let mut dkb = dk.slice_mut(s![kr, cols]);
                dkb += &dp.t().dot(&qb);
                slot += 1;
            }
        }
        if self.nodes[c.q.0].tracked {
            add_into(&mut grads[c.q.0], dq);
        }
        if self.nodes[c.k.0].tracked {
            add_into(&mut grads[c.k.0], dk);
        }
        if self.nodes[c.v.0].tracked {
            add_into(&mut grads[c.v.0], dv);
        }
    }
}

fn softmax_rows_inplace(p: &mut Mat, causal: bool) {
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row.iter().take(limit).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}
