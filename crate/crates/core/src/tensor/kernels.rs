//! Index arithmetic and dense kernels shared by the tape ops.

use crate::error::{Error, Result};

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Trailing-aligned broadcast of two shapes with size-1 expansion.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `src` viewed with the shape `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `shape` in row-major order, calling
/// `f(flat, offset_a, offset_b)` with offsets computed from the two
/// stride vectors.
pub(crate) fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(flat, oa + j * ia, ob + j * ib);
            flat += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `walk2` with a single mapped stride set.
pub(crate) fn walk1(shape: &[usize], sa: &[usize], mut f: impl FnMut(usize, usize)) {
    let zeros = vec![0; shape.len()];
    walk2(shape, sa, &zeros, |flat, a, _| f(flat, a));
}

/// Strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = beta·c + a·b` for an `m×k` times `k×n` product. `c` is row-major
/// with row stride `ldc`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm: lhs buffer too small");
    assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm: rhs buffer too small");
    assert!(c.len() >= span(m, n, ldc, 1), "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every access stays within the spans asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn walk_visits_in_row_major_order() {
        let shape = [2, 3];
        let sa = broadcast_strides(&[3], &shape);
        let mut seen = Vec::new();
        walk1(&shape, &sa, |flat, a| seen.push((flat, a)));
        assert_eq!(seen, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, MatRef::row_major(&a, 3), MatRef::row_major(&b, 2), 0.0, &mut c, 2);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        // aᵀ·a via strides
        let mut d = [0.0; 9];
        gemm(3, 2, 3, MatRef::transposed(&a, 3), MatRef::row_major(&a, 3), 0.0, &mut d, 3);
        assert_eq!(d[0], 17.0);
        assert_eq!(d[8], 45.0);
    }
}
