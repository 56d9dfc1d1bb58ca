//! Slice-level kernels shared by the forward and backward passes.

use super::Scalar;

/// Row-major `m×k` (or `k×m` when `trans`) operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub trans: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn n(data: &'a [T]) -> Self {
        Self { data, trans: false }
    }
    pub fn t(data: &'a [T]) -> Self {
        Self { data, trans: true }
    }
}

/// `c = a·b + beta·c` where `a` is logically `m×k`, `b` is `k×n` and
/// `c` is a row-major `m×n` buffer.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.data.len(), m * k, "gemm lhs size");
    assert_eq!(b.data.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: sizes are checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize, out: &mut [T]) {
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], width: usize, dx: &mut [T]) {
    for ((y, dy), dx) in y
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let dot = y.iter().zip(dy).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
            *d = yv * (g - dot);
        }
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + total.ln()
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x·Φ(x)`.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

/// `d/dx x·Φ(x) = Φ(x) + x·φ(x)`.
#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

/// Per-row statistics kept for the layer-norm backward pass.
pub(crate) struct NormStats<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    keep_stats: bool,
) -> Option<NormStats<T>> {
    let width = gamma.len();
    let n = T::from_usize(width).expect("width");
    let rows = x.len() / width;
    let mut stats = keep_stats.then(|| NormStats {
        x_hat: vec![T::zero(); x.len()],
        inv_std: Vec::with_capacity(rows),
    });
    for (r, (src, dst)) in x
        .chunks_exact(width)
        .zip(out.chunks_exact_mut(width))
        .enumerate()
    {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = src.iter().fold(T::zero(), |a, &v| {
            let c = v - mean;
            a + c * c
        }) / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (i, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
            let xh = (s - mean) * inv_std;
            *d = xh * gamma[i] + beta[i];
            if let Some(st) = stats.as_mut() {
                st.x_hat[r * width + i] = xh;
            }
        }
        if let Some(st) = stats.as_mut() {
            st.inv_std.push(inv_std);
        }
    }
    stats
}

/// Maps each element of a tensor of shape `big` to its index in a tensor of
/// shape `small` broadcast against it (right-aligned, size-1 axes repeat).
pub(crate) fn broadcast_index_map(big: &[usize], small: &[usize]) -> Vec<usize> {
    let total: usize = big.iter().product();
    let offset = big.len() - small.len();
    let mut small_strides = vec![0usize; big.len()];
    let mut stride = 1;
    for (i, &dim) in small.iter().enumerate().rev() {
        if dim != 1 {
            small_strides[offset + i] = stride;
        }
        stride *= dim;
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; big.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            pos += small_strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            pos -= small_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// True when `small` broadcasts to `big` under right alignment.
pub(crate) fn broadcasts_to(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len()
        && small
            .iter()
            .rev()
            .zip(big.iter().rev())
            .all(|(&s, &b)| s == b || s == 1)
}

/// How `small` sits inside `big` when broadcast, specialised for the hot cases.
pub(crate) enum Broadcast {
    Same,
    /// `small` equals a suffix of `big`: index is `i % len`.
    Suffix(usize),
    General(Vec<usize>),
}

pub(crate) fn classify_broadcast(big: &[usize], small: &[usize]) -> Broadcast {
    if big == small {
        Broadcast::Same
    } else if big.ends_with(small) {
        Broadcast::Suffix(small.iter().product())
    } else {
        Broadcast::General(broadcast_index_map(big, small))
    }
}

impl Broadcast {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::General(map) => map[i],
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into `dst` so that `dst` has axes in
/// the order `axes`.
pub(crate) fn permute_into<T: Copy>(src: &[T], shape: &[usize], axes: &[usize], dst: &mut [T]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gathered: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    // Innermost axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = gathered[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let row = &mut dst[o * inner..(o + 1) * inner];
        if inner_stride == 1 {
            row.copy_from_slice(&src[base..base + inner]);
        } else {
            for (j, d) in row.iter_mut().enumerate() {
                *d = src[base + j * inner_stride];
            }
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += gathered[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= gathered[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
