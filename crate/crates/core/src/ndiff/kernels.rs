//! Dense matrix kernels. All of them accumulate into `out` in a fixed loop
//! order, so results do not depend on thread count.

use super::Real;

/// `out[n,m] += a[n,k] · b[k,m]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] · b[m,k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = out[i * m + j] + dot(arow, brow);
        }
    }
}

/// `out[n,m] += a[k,n]ᵀ · b[k,m]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Four-lane dot product; lane order is fixed.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] = acc[0] + a[o] * b[o];
        acc[1] = acc[1] + a[o + 1] * b[o + 1];
        acc[2] = acc[2] + a[o + 2] * b[o + 2];
        acc[3] = acc[3] + a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s = s + a[o] * b[o];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (n, k, m) = (3, 5, 4);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(&a, &b, n, k, m);

        let mut nn = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut nn, n, k, m);

        // bᵀ stored as [m,k]
        let mut bt = vec![0.0; m * k];
        for p in 0..k {
            for j in 0..m {
                bt[j * k + p] = b[p * m + j];
            }
        }
        let mut nt = vec![0.0; n * m];
        gemm_nt(&a, &bt, &mut nt, n, k, m);

        // aᵀ stored as [k,n]
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for p in 0..k {
                at[p * n + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; n * m];
        gemm_tn(&at, &b, &mut tn, k, n, m);

        for idx in 0..n * m {
            assert!((nn[idx] - expect[idx]).abs() < 1e-12);
            assert!((nt[idx] - expect[idx]).abs() < 1e-12);
            assert!((tn[idx] - expect[idx]).abs() < 1e-12);
        }
    }
}
