//! Primitive operations: forward kernels, shape rules and vector-Jacobian
//! products.

use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Variance floor inside `LayerNorm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cubic coefficient of the tanh-approximated GELU:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub const GELU_COEF: f64 = 0.044715;

/// Primitive op tags. Per-op shape rules:
///
/// | op | inputs | output |
/// |----|--------|--------|
/// | `MatMul` | `[m,k]`, `[k,n]` | `[m,n]` |
/// | `Add`, `Mul` | `[r,c]`, `[r,c]` or a `[1,c]`/`[c]` row broadcast over rows | `[r,c]` |
/// | `Scale`, `Gelu`, `Sigmoid`, `Log`, `Exp`, `Clamp` | any | same |
/// | `RowSoftmax`, `LayerNorm` | `[r,c]` | `[r,c]`, per row |
/// | `EmbeddingLookup(ix)` | table `[v,d]` | `[ix.len(),d]` |
/// | `Transpose` | `[r,c]` | `[c,r]` |
/// | `ConcatRows` | `[r_k,c]`… | `[Σr_k,c]` |
/// | `ConcatCols` | `[r,c_k]`… | `[r,Σc_k]` |
/// | `SliceCols{start,len}` | `[r,c]` | `[r,len]` |
/// | `Sum`, `Mean` | any | `[1]` |
/// | `CosineSimilarity` | `[n,d]`, `[m,d]` | `[n,m]` |
/// | `ScatterRows(pos)` | base `[r,c]`, rows `[pos.len(),c]` | `[r,c]` |
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input or parameter; has no forward rule of its own.
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale(f64),
    RowSoftmax,
    /// Normalization only; any affine part is expressed with `Mul`/`Add`.
    LayerNorm,
    Gelu,
    EmbeddingLookup(Vec<usize>),
    Transpose,
    ConcatRows,
    Sum,
    Mean,
    Sigmoid,
    Log,
    Exp,
    CosineSimilarity,
    Clamp { lo: f64, hi: f64 },
    SliceCols { start: usize, len: usize },
    ConcatCols,
    /// Replace the rows at the given positions of the first input with the
    /// rows of the second input.
    ScatterRows(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::RowSoftmax => "row_softmax",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::EmbeddingLookup(_) => "embedding_lookup",
            Op::Transpose => "transpose",
            Op::ConcatRows => "concat_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::CosineSimilarity => "cosine_similarity",
            Op::Clamp { .. } => "clamp",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::ScatterRows(_) => "scatter_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::Add | Op::Mul | Op::CosineSimilarity | Op::ScatterRows(_) => Some(2),
            Op::ConcatRows | Op::ConcatCols => None,
            _ => Some(1),
        }
    }
}

fn shape_err(op: &Op, inputs: &[&Tensor<impl Scalar>], why: &str) -> Error {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    Error::contract(op.name(), format!("{why}; input shapes {shapes:?}"))
}

fn is_row_broadcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> bool {
    a.shape() != b.shape() && b.rows() == 1 && b.numel() == a.cols() && a.shape().len() == 2
}

fn zip_broadcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let c = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| f(x, if bd.len() == a.numel() { bd[k] } else { bd[k % c] }))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn gelu<S: Scalar>(x: S) -> S {
    let k = S::of((2.0 / std::f64::consts::PI).sqrt());
    let half = S::of(0.5);
    half * x * (S::one() + (k * (x + S::of(GELU_COEF) * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::of((2.0 / std::f64::consts::PI).sqrt());
    let c = S::of(GELU_COEF);
    let half = S::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::of(3.0) * c * x * x)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (r, c) = x.dims2();
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-row mean and inverse standard deviation.
fn layer_norm_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::of_usize(row.len());
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + S::of(LAYER_NORM_EPS)).sqrt())
}

fn row_norms<S: Scalar>(t: &Tensor<S>, op: &Op) -> Result<Vec<S>> {
    (0..t.rows())
        .map(|i| {
            let n = kernels::norm(t.row(i));
            if n == S::zero() {
                Err(Error::Degenerate(format!("{}: zero-norm row {i}", op.name())))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Evaluates one primitive. Output values are checked for finiteness.
pub fn primitive_forward<S: Scalar>(op: &Op, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(shape_err(op, inputs, &format!("expects {n} inputs")));
        }
    } else if inputs.is_empty() {
        return Err(shape_err(op, inputs, "expects at least one input"));
    }
    let out = forward_unchecked(op, inputs)?;
    if !out.all_finite() {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

fn forward_unchecked<S: Scalar>(op: &Op, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    Ok(match op {
        Op::Leaf => return Err(shape_err(op, inputs, "leaves have no forward rule")),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ((m, k), (k2, n)) = (a.dims2(), b.dims2());
            if k != k2 || a.shape().len() > 2 || b.shape().len() > 2 {
                return Err(shape_err(op, inputs, "inner dimensions differ"));
            }
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        }
        Op::Add | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() && !is_row_broadcast(a, b) {
                return Err(shape_err(op, inputs, "shapes neither equal nor row-broadcastable"));
            }
            if matches!(op, Op::Add) {
                zip_broadcast(a, b, |x, y| x + y)
            } else {
                zip_broadcast(a, b, |x, y| x * y)
            }
        }
        Op::Scale(k) => {
            let k = S::of(*k);
            inputs[0].map(|x| x * k)
        }
        Op::RowSoftmax => softmax_rows(inputs[0]),
        Op::LayerNorm => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = x.row(i);
                let (mean, inv) = layer_norm_stats(row);
                out.extend(row.iter().map(|&v| (v - mean) * inv));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::Gelu => inputs[0].map(gelu),
        Op::EmbeddingLookup(ix) => {
            let table = inputs[0];
            let (v, d) = table.dims2();
            if ix.is_empty() {
                return Err(shape_err(op, inputs, "empty index list"));
            }
            let mut out = Vec::with_capacity(ix.len() * d);
            for &i in ix {
                if i >= v {
                    return Err(Error::Lookup {
                        op: "embedding_lookup",
                        index: i,
                        len: v,
                    });
                }
                out.extend_from_slice(table.row(i));
            }
            Tensor::from_parts(vec![ix.len(), d], out)
        }
        Op::Transpose => {
            let (r, c) = inputs[0].dims2();
            Tensor::from_parts(vec![c, r], kernels::transpose(inputs[0].data(), r, c))
        }
        Op::ConcatRows => {
            let c = inputs[0].cols();
            if inputs.iter().any(|t| t.cols() != c) {
                return Err(shape_err(op, inputs, "column counts differ"));
            }
            let rows = inputs.iter().map(|t| t.rows()).sum();
            let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::from_parts(vec![rows, c], data)
        }
        Op::ConcatCols => {
            let r = inputs[0].rows();
            if inputs.iter().any(|t| t.rows() != r) {
                return Err(shape_err(op, inputs, "row counts differ"));
            }
            let cols: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for t in inputs {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::from_parts(vec![r, cols], data)
        }
        Op::SliceCols { start, len } => {
            let (r, c) = inputs[0].dims2();
            if *len == 0 || start + len > c {
                return Err(shape_err(op, inputs, &format!("slice {start}..{} out of range", start + len)));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&inputs[0].row(i)[*start..start + len]);
            }
            Tensor::from_parts(vec![r, *len], data)
        }
        Op::Sum => Tensor::scalar(inputs[0].data().iter().copied().sum()),
        Op::Mean => {
            let t = inputs[0];
            Tensor::scalar(t.data().iter().copied().sum::<S>() / S::of_usize(t.numel()))
        }
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::Log => inputs[0].map(|x| x.ln()),
        Op::Exp => inputs[0].map(|x| x.exp()),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (S::of(*lo), S::of(*hi));
            inputs[0].map(|x| x.max(lo).min(hi))
        }
        Op::CosineSimilarity => {
            let (a, b) = (inputs[0], inputs[1]);
            let ((n, d), (m, d2)) = (a.dims2(), b.dims2());
            if d != d2 {
                return Err(shape_err(op, inputs, "vector dimensions differ"));
            }
            let (na, nb) = (row_norms(a, op)?, row_norms(b, op)?);
            let mut out = kernels::matmul_nt(a.data(), b.data(), n, d, m);
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] /= na[i] * nb[j];
                }
            }
            Tensor::from_parts(vec![n, m], out)
        }
        Op::ScatterRows(pos) => {
            let (base, rows) = (inputs[0], inputs[1]);
            let (r, c) = base.dims2();
            if rows.dims2() != (pos.len(), c) {
                return Err(shape_err(op, inputs, "replacement rows do not match positions"));
            }
            for (k, &p) in pos.iter().enumerate() {
                if p >= r {
                    return Err(Error::Lookup {
                        op: "scatter_rows",
                        index: p,
                        len: r,
                    });
                }
                if pos[..k].contains(&p) {
                    return Err(shape_err(op, inputs, &format!("duplicate position {p}")));
                }
            }
            let mut out = base.clone();
            for (k, &p) in pos.iter().enumerate() {
                out.row_mut(p).copy_from_slice(rows.row(k));
            }
            out
        }
    })
}

fn col_sums<S: Scalar>(g: &Tensor<S>, like: &Tensor<S>) -> Tensor<S> {
    let (r, c) = g.dims2();
    let mut acc = vec![S::zero(); c];
    for i in 0..r {
        for (a, &v) in acc.iter_mut().zip(g.row(i)) {
            *a += v;
        }
    }
    Tensor::from_parts(like.shape().to_vec(), acc)
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Vector-Jacobian products: given the upstream gradient `g` of the output,
/// returns the gradient for every input flagged in `need`.
pub(crate) fn vjp<S: Scalar>(
    op: &Op,
    inputs: &[&Tensor<S>],
    out: &Tensor<S>,
    g: &Tensor<S>,
    need: &[bool],
) -> Vec<Option<Tensor<S>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ((m, k), (_, n)) = (a.dims2(), b.dims2());
            let da = want(0).then(|| {
                Tensor::from_parts(a.shape().to_vec(), kernels::matmul_nt(g.data(), b.data(), m, n, k))
            });
            let db = want(1).then(|| {
                Tensor::from_parts(b.shape().to_vec(), kernels::matmul_tn(a.data(), g.data(), m, k, n))
            });
            vec![da, db]
        }
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = want(0).then(|| g.clone());
            let db = want(1).then(|| {
                if is_row_broadcast(a, b) {
                    col_sums(g, b)
                } else {
                    g.clone()
                }
            });
            vec![da, db]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = want(0).then(|| zip_broadcast(g, b, |x, y| x * y));
            let db = want(1).then(|| {
                let prod = zip_map(g, a, |x, y| x * y);
                if is_row_broadcast(a, b) {
                    col_sums(&prod, b)
                } else {
                    prod
                }
            });
            vec![da, db]
        }
        Op::Scale(k) => {
            let k = S::of(*k);
            vec![want(0).then(|| g.map(|x| x * k))]
        }
        Op::RowSoftmax => {
            let (r, c) = out.dims2();
            let mut dx = vec![S::zero(); r * c];
            for i in 0..r {
                let (y, gy) = (out.row(i), g.row(i));
                let s = dot(y, gy);
                for j in 0..c {
                    dx[i * c + j] = y[j] * (gy[j] - s);
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::LayerNorm => {
            let x = inputs[0];
            let (r, c) = x.dims2();
            let n = S::of_usize(c);
            let mut dx = vec![S::zero(); r * c];
            for i in 0..r {
                let (_, inv) = layer_norm_stats(x.row(i));
                let (xh, gy) = (out.row(i), g.row(i));
                let mg = gy.iter().copied().sum::<S>() / n;
                let mgx = dot(gy, xh) / n;
                for j in 0..c {
                    dx[i * c + j] = inv * (gy[j] - mg - xh[j] * mgx);
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
        }
        Op::Gelu => vec![Some(zip_map(g, inputs[0], |gy, x| gy * gelu_grad(x)))],
        Op::Sigmoid => vec![Some(zip_map(g, out, |gy, y| gy * y * (S::one() - y)))],
        Op::Exp => vec![Some(zip_map(g, out, |gy, y| gy * y))],
        Op::Log => vec![Some(zip_map(g, inputs[0], |gy, x| gy / x))],
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (S::of(*lo), S::of(*hi));
            vec![Some(zip_map(g, inputs[0], |gy, x| {
                if x > lo && x < hi {
                    gy
                } else {
                    S::zero()
                }
            }))]
        }
        Op::EmbeddingLookup(ix) => {
            let table = inputs[0];
            let mut dt = Tensor::zeros(table.shape());
            for (k, &i) in ix.iter().enumerate() {
                for (d, &v) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += v;
                }
            }
            vec![Some(dt)]
        }
        Op::Transpose => {
            let (r, c) = g.dims2();
            vec![Some(Tensor::from_parts(
                inputs[0].shape().to_vec(),
                kernels::transpose(g.data(), r, c),
            ))]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let len = t.numel();
                    let piece = want(k).then(|| {
                        Tensor::from_parts(t.shape().to_vec(), g.data()[offset..offset + len].to_vec())
                    });
                    offset += len;
                    piece
                })
                .collect()
        }
        Op::ConcatCols => {
            let r = g.rows();
            let mut start = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let w = t.cols();
                    let piece = want(k).then(|| {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        Tensor::from_parts(t.shape().to_vec(), data)
                    });
                    start += w;
                    piece
                })
                .collect()
        }
        Op::SliceCols { start, len } => {
            let mut dx = Tensor::zeros(inputs[0].shape());
            for i in 0..g.rows() {
                dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
            }
            vec![Some(dx)]
        }
        Op::Sum => {
            let gv = g.data()[0];
            vec![Some(Tensor::full(inputs[0].shape(), gv))]
        }
        Op::Mean => {
            let t = inputs[0];
            let gv = g.data()[0] / S::of_usize(t.numel());
            vec![Some(Tensor::full(t.shape(), gv))]
        }
        Op::CosineSimilarity => {
            let (a, b) = (inputs[0], inputs[1]);
            let ((n, d), (m, _)) = (a.dims2(), b.dims2());
            // Norms were validated non-zero in the forward pass.
            let na: Vec<S> = (0..n).map(|i| kernels::norm(a.row(i))).collect();
            let nb: Vec<S> = (0..m).map(|j| kernels::norm(b.row(j))).collect();
            let mut da = want(0).then(|| Tensor::zeros(a.shape()));
            let mut db = want(1).then(|| Tensor::zeros(b.shape()));
            for i in 0..n {
                for j in 0..m {
                    let gij = g.get(i, j);
                    if gij == S::zero() {
                        continue;
                    }
                    let cij = out.get(i, j);
                    let inv = S::one() / (na[i] * nb[j]);
                    if let Some(da) = da.as_mut() {
                        let ca = cij / (na[i] * na[i]);
                        for t in 0..d {
                            da.row_mut(i)[t] += gij * (b.row(j)[t] * inv - ca * a.row(i)[t]);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let cb = cij / (nb[j] * nb[j]);
                        for t in 0..d {
                            db.row_mut(j)[t] += gij * (a.row(i)[t] * inv - cb * b.row(j)[t]);
                        }
                    }
                }
            }
            vec![da, db]
        }
        Op::ScatterRows(pos) => {
            let dbase = want(0).then(|| {
                let mut t = g.clone();
                for &p in pos {
                    t.row_mut(p).iter_mut().for_each(|v| *v = S::zero());
                }
                t
            });
            let drows = want(1).then(|| {
                let c = g.cols();
                let mut data = Vec::with_capacity(pos.len() * c);
                for &p in pos {
                    data.extend_from_slice(g.row(p));
                }
                Tensor::from_parts(inputs[1].shape().to_vec(), data)
            });
            vec![dbase, drows]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = primitive_forward(&Op::MatMul, &[&Tensor::identity(3), &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let x = t(1, 2, &[0.0, 3f64.ln()]);
        let y = primitive_forward(&Op::RowSoftmax, &[&x]).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(1, 4, &[2.5; 4]);
        let y = primitive_forward(&Op::LayerNorm, &[&x]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_reference_values() {
        // Values of the tanh formula computed independently.
        let x = t(1, 3, &[0.0, 1.0, -2.0]);
        let y = primitive_forward(&Op::Gelu, &[&x]).unwrap();
        let reference = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        for (a, &xv) in y.data().iter().zip(&[0.0, 1.0, -2.0]) {
            assert!((a - reference(xv)).abs() < 1e-15);
        }
        assert!((y.data()[1] - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = primitive_forward(&Op::MatMul, &[&t(2, 3, &[0.0; 6]), &t(2, 3, &[0.0; 6])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn lookup_out_of_bounds() {
        let table = t(2, 2, &[0.0; 4]);
        let err = primitive_forward(&Op::EmbeddingLookup(vec![0, 2]), &[&table]).unwrap_err();
        assert!(matches!(err, Error::Lookup { index: 2, len: 2, .. }));
    }

    #[test]
    fn log_of_zero_is_surfaced() {
        let err = primitive_forward(&Op::Log, &[&t(1, 1, &[0.0])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log" }));
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let a = t(1, 2, &[0.0, 0.0]);
        let b = t(1, 2, &[1.0, 0.0]);
        let err = primitive_forward(&Op::CosineSimilarity, &[&a, &b]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn scatter_rejects_duplicates() {
        let base = t(3, 1, &[0.0; 3]);
        let rows = t(2, 1, &[1.0, 2.0]);
        assert!(primitive_forward(&Op::ScatterRows(vec![1, 1]), &[&base, &rows]).is_err());
        let ok = primitive_forward(&Op::ScatterRows(vec![2, 0]), &[&base, &rows]).unwrap();
        assert_eq!(ok.data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn row_broadcast_add() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t(1, 2, &[10.0, 20.0]);
        let y = primitive_forward(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(primitive_forward(&Op::Add, &[&b, &a]).is_err());
    }
}
