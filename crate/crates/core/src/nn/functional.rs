//! Shape-checked, tape-free versions of the basic operations.

use ndarray::{s, Array2, Axis};

use super::tape::{Tape, LAYER_NORM_EPS};
use super::{NnError, ParamStore};

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), NnError> {
    if cond {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(msg()))
    }
}

/// `x W + b` with `b` a 1×m row.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    check(x.ncols() == w.nrows(), || format!("x is {:?}, W is {:?}", x.dim(), w.dim()))?;
    check(b.dim() == (1, w.ncols()), || format!("bias is {:?}, expected (1, {})", b.dim(), w.ncols()))?;
    Ok(x.dot(w) + b)
}

pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let v = t.constant(x.clone());
    let y = t.gelu(v);
    t.value(y).clone()
}

/// Normalizes the last axis (ε = 1e-5), then applies `scale`/`shift` rows.
pub fn layer_norm(x: &Array2<f64>, scale: &Array2<f64>, shift: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    let d = x.ncols();
    check(scale.dim() == (1, d) && shift.dim() == (1, d), || {
        format!("scale {:?} / shift {:?} must be (1, {d})", scale.dim(), shift.dim())
    })?;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows").insert_axis(Axis(1));
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows").insert_axis(Axis(1));
    let normed = centered / var.mapv(|v| (v + LAYER_NORM_EPS).sqrt());
    Ok(normed * scale + shift)
}

/// `layer_norm(h) ⊙ (1 + γ) + β` with per-row (or broadcast 1×d) γ and β.
pub fn adaln(h: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    let d = h.ncols();
    let ok = |m: &Array2<f64>| m.ncols() == d && (m.nrows() == 1 || m.nrows() == h.nrows());
    check(ok(gamma) && ok(beta), || format!("modulation {:?}/{:?} vs h {:?}", gamma.dim(), beta.dim(), h.dim()))?;
    let ones = Array2::ones((1, d));
    let zeros = Array2::zeros((1, d));
    let n = layer_norm(h, &ones, &zeros)?;
    Ok(n * &(gamma + 1.0) + beta)
}

/// Multi-head scaled dot-product attention. `mask[i, j]` marks key `j` as
/// attendable from query `i`; heads split the columns evenly and their
/// outputs are concatenated.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<bool>>,
    heads: usize,
) -> Result<Array2<f64>, NnError> {
    let d = q.ncols();
    check(heads > 0 && d % heads == 0, || format!("width {d} not divisible by {heads} heads"))?;
    check(k.ncols() == d && v.ncols() == d, || "query/key/value widths differ".to_string())?;
    check(k.nrows() == v.nrows(), || "key/value row counts differ".to_string())?;
    if k.nrows() == 0 {
        return Err(NnError::EmptySequence);
    }
    if let Some(m) = mask {
        check(m.dim() == (q.nrows(), k.nrows()), || format!("mask {:?} vs ({}, {})", m.dim(), q.nrows(), k.nrows()))?;
        if let Some(i) = m.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(NnError::AllMasked(i));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut logits = q.slice(s![.., cols.clone()]).dot(&k.slice(s![.., cols.clone()]).t()) * scale;
        for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let max = row.iter().enumerate().filter(|(j, _)| allowed(*j)).map(|(_, &x)| x).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if allowed(j) { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            row.mapv_inplace(|x| x / sum);
        }
        out.slice_mut(s![.., cols.clone()]).assign(&logits.dot(&v.slice(s![.., cols])));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_of_zero_is_zero() {
        assert_eq!(gelu(&array![[0.0]])[[0, 0]], 0.0);
    }

    #[test]
    fn two_point_layer_norm() {
        let y = layer_norm(&array![[2.0, -2.0]], &array![[1.0, 1.0]], &array![[0.0, 0.0]]).unwrap();
        assert!((y[[0, 0]] - 1.0).abs() < 1e-5 && (y[[0, 1]] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn identity_linear() {
        let x = array![[1.0, -2.0, 3.5]];
        let y = linear(&x, &Array2::eye(3), &Array2::zeros((1, 3))).unwrap();
        assert_eq!(y, x);
        assert!(linear(&x, &Array2::eye(2), &Array2::zeros((1, 2))).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = array![[0.3, -1.0], [5.0, 2.0]];
        let k = array![[1.0, 1.0]];
        let v = array![[7.0, -3.0]];
        let out = attention(&q, &k, &v, None, 1).unwrap();
        for row in out.rows() {
            assert!((row[0] - 7.0).abs() < 1e-12 && (row[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let q = Array2::zeros((1, 2));
        let k = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let v = array![[3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
        let out = attention(&q, &k, &v, None, 2).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12 && (out[[0, 1]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = Array2::zeros((2, 2));
        let k = Array2::zeros((2, 2));
        let mask = array![[true, false], [false, false]];
        assert_eq!(attention(&q, &k, &k, Some(&mask), 1), Err(NnError::AllMasked(1)));
    }

    #[test]
    fn adaln_with_gamma_minus_one_returns_beta() {
        let h = array![[1.0, 5.0, -2.0], [0.1, 0.2, 0.3]];
        let gamma = Array2::from_elem((1, 3), -1.0);
        let beta = array![[0.5, -0.5, 2.0]];
        let out = adaln(&h, &gamma, &beta).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -0.5, 2.0]);
        }
    }
}
