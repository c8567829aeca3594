//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! Everything above this module (the language model, the collaborative
//! model, the projections) is expressed as [`Graph`] programs over the
//! primitives in [`Op`].

mod graph;
pub(crate) mod kernels;
pub use kernels::cosine;
mod ops;

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use graph::{grad_check, Gradients, Graph, NodeId};
pub use ops::{primitive_forward, Op, GELU_COEF, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(
                "tensor",
                format!("shape must be non-empty positive dims, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    /// `rows × cols` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::of(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(
                "item",
                format!("expected one element, shape {:?}", self.shape),
            ))
        }
    }

    /// `(rows, cols)` view: 2-D tensors as-is, 1-D tensors as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        )
    }

    pub fn into_shared(self) -> Arc<Self> {
        Arc::new(self)
    }

    /// Writes the dump format: a `shape: d0 d1 ...` header line followed by
    /// little-endian 64-bit floats.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "shape: {}", dims.join(" "))?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.dump(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::Checkpoint(format!("reading tensor header: {e}")))?;
        let dims = header
            .trim_end_matches('\n')
            .strip_prefix("shape: ")
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor header {header:?}")))?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(format!("bad tensor header {header:?}: {e}")))?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("reading {n} tensor values: {e}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_dump_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::load(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn dump_header_and_payload() {
        let t = Tensor::<f64>::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap();
        let bytes = t.to_dump_bytes();
        assert!(bytes.starts_with(b"shape: 2 3\n"));
        assert_eq!(bytes.len(), "shape: 2 3\n".len() + 6 * 8);
        let back = Tensor::<f64>::load(&bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f32_roundtrips_through_f64_dump() {
        let t = Tensor::<f32>::matrix(1, 2, vec![0.25, -3.0]).unwrap();
        let back = Tensor::<f32>::load(&t.to_dump_bytes()[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn load_rejects_truncated_payload() {
        let mut bytes = Tensor::<f64>::scalar(1.0).to_dump_bytes();
        bytes.pop();
        assert!(Tensor::<f64>::load(&bytes[..]).is_err());
    }
}
