//! Row-blocked single-precision GEMM on top of `matrixmultiply`.

use crate::par;

/// Layout of a row-major operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Use as stored.
    N,
    /// Use transposed.
    T,
}

/// `c[m,n] = op(a)[m,k] · op(b)[k,n] + beta · c`.
///
/// `a` is stored `[m,k]` for [`Op::N`] and `[k,m]` for [`Op::T`]; likewise `b`
/// is `[k,n]` or `[n,k]`. Output rows are split across workers.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    op_a: Op,
    b: &[f32],
    op_b: Op,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let rows = par::chunk_len(m, 16);
    par::for_each_chunk_mut(c, rows * n, |ci, cc| {
        let r0 = ci * rows;
        let mr = cc.len() / n;
        let (a_off, rsa, csa) = match op_a {
            Op::N => (r0 * k, k as isize, 1),
            Op::T => (r0, 1, m as isize),
        };
        // SAFETY: strides and extents describe sub-blocks that lie inside the
        // slices checked above; `cc` is exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                mr,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                cc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}
