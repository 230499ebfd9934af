//! Dense kernels shared by the recording tape and the cache-based decoder.
//!
//! Every routine here is a pure function of its inputs with a fixed
//! iteration order, so the tape forward and the incremental decoder agree
//! bit for bit on identical inputs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable by the tape.
///
/// Training runs in `f32`; gradient checks run the same op code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` over strided operands.
    ///
    /// # Safety
    /// Every index addressed by the shapes and strides must lie inside the
    /// corresponding allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A row-major matrix view, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    /// Leading dimension (distance between consecutive stored rows).
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, S> MatRef<'a, S> {
    pub fn new(data: &'a [S], ld: usize) -> Self {
        Self {
            data,
            ld,
            transposed: false,
        }
    }

    pub fn t(data: &'a [S], ld: usize) -> Self {
        Self {
            data,
            ld,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        let (r, c) = if self.transposed {
            (cols, rows)
        } else {
            (rows, cols)
        };
        (r - 1) * self.ld + c
    }
}

/// `c[m×n] = a[m×k]·b[k×n] (+ c when accumulate)`; `c` has leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, S>,
    b: MatRef<'_, S>,
    c: &mut [S],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.extent(m, k), "gemm: lhs too short");
    assert!(b.data.len() >= b.extent(k, n), "gemm: rhs too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: output too short");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { S::one() } else { S::zero() };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(S::zero());
            }
        }
        return;
    }
    // SAFETY: extents checked above against every strided access.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row-wise layer norm. Writes per-row mean and reciprocal std for backward.
pub fn layer_norm_rows<S: Real>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    width: usize,
    out: &mut [S],
    mean: &mut [S],
    rstd: &mut [S],
) {
    let w = S::from_usize(width).unwrap();
    let eps = S::lit(LN_EPS);
    for (r, (row, orow)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
        let mu = row.iter().copied().sum::<S>() / w;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / w;
        let rs = S::one() / (var + eps).sqrt();
        for j in 0..width {
            orow[j] = (row[j] - mu) * rs * gamma[j] + beta[j];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

pub fn gelu<S: Real>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let half = S::lit(0.5);
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

/// In-place numerically stable softmax over `row[..valid]`; entries past
/// `valid` are set to zero.
pub fn softmax_prefix<S: Real>(row: &mut [S], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= total;
    }
    for v in row[valid..].iter_mut() {
        *v = S::zero();
    }
}

/// Multi-head scaled dot-product attention over a packed `[T × 3d]` q/k/v
/// matrix. Writes the `[T × d]` output and, when given, the per-head
/// probability matrices `[heads × T × T]`.
pub fn attention_forward<S: Real>(
    qkv: &[S],
    seq: usize,
    d: usize,
    heads: usize,
    causal: bool,
    out: &mut [S],
    probs: &mut [S],
) {
    let dh = d / heads;
    let ld = 3 * d;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    for h in 0..heads {
        let p = &mut probs[h * seq * seq..(h + 1) * seq * seq];
        gemm(
            seq,
            dh,
            seq,
            MatRef::new(&qkv[h * dh..], ld),
            MatRef::t(&qkv[d + h * dh..], ld),
            p,
            seq,
            false,
        );
        for i in 0..seq {
            let row = &mut p[i * seq..(i + 1) * seq];
            for v in row.iter_mut() {
                *v *= scale;
            }
            softmax_prefix(row, if causal { i + 1 } else { seq });
        }
        gemm(
            seq,
            seq,
            dh,
            MatRef::new(p, seq),
            MatRef::new(&qkv[2 * d + h * dh..], ld),
            &mut out[h * dh..],
            d,
            false,
        );
    }
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Real>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpose_modes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        // a as 3x4, b as 4x5
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, MatRef::new(&a, 4), MatRef::new(&b, 5), &mut c, 5, false);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 5 + j]).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
        // a read transposed as 4x3 (stored 3x4) times c (3x5)
        let mut d = vec![1.0; 20];
        gemm(4, 3, 5, MatRef::t(&a, 4), MatRef::new(&c, 5), &mut d, 5, true);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = 1.0 + (0..3).map(|p| a[p * 4 + i] * c[p * 5 + j]).sum::<f64>();
                assert!((d[i * 5 + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn softmax_masks_suffix() {
        let mut row = [1.0f64, 2.0, 3.0, 4.0];
        softmax_prefix(&mut row, 2);
        assert_eq!(row[2], 0.0);
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}
