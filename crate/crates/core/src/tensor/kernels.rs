//! Raw slice kernels shared by the forward and reverse passes.

use super::strides;

/// `c (+)= op(a) · op(b)` for row-major operands, where `a` is `m×k` after
/// the optional transpose and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every slice to the extents implied by the
    // strides, so all addressed elements are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if perm.iter().enumerate().all(|(a, &p)| a == p) {
        return data.to_vec();
    }
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 || data.is_empty() {
        return data.to_vec();
    }
    let last = rank - 1;
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let step = walk[last];
        for t in 0..out_shape[last] {
            out.push(data[base + t * step]);
        }
        // advance the outer multi-index, maintaining `base`
        for a in (0..last).rev() {
            index[a] += 1;
            base += walk[a];
            if index[a] < out_shape[a] {
                break;
            }
            base -= walk[a] * out_shape[a];
            index[a] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    inv
}
