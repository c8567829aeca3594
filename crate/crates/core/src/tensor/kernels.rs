//! Plain-loop dense kernels. Loop orders keep the innermost access
//! contiguous so the compiler can vectorize them.

use crate::scalar::Scalar;

/// `a[m×k] · b[k×n]`. Every output element accumulates over `p` in
/// increasing order; rows are processed four at a time so each row of `b`
/// is loaded once per block.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    matmul(&transpose(a, k, m), b, m, k, n)
}

pub(crate) fn transpose<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors; `None` when either is zero.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    let (na, nb) = (norm(a), norm(b));
    if na == S::zero() || nb == S::zero() {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), ab);
    }
}
