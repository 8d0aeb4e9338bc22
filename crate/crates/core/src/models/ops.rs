//! Dense row-major kernels used by the hand-written forward/backward passes.

use crate::scalar::Real;

/// `out = W x` with `W` of shape `rows × x.len()`.
pub(crate) fn matvec<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `out += Wᵀ v` with `W` of shape `v.len() × out.len()`.
pub(crate) fn matvec_t_acc<T: Real>(w: &[T], v: &[T], out: &mut [T]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), v.len() * cols);
    for (&vi, row) in v.iter().zip(w.chunks_exact(cols)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o = *o + vi * a;
        }
    }
}

/// `gw += dy xᵀ`.
pub(crate) fn outer_acc<T: Real>(gw: &mut [T], dy: &[T], x: &[T]) {
    let cols = x.len();
    debug_assert_eq!(gw.len(), dy.len() * cols);
    for (&d, row) in dy.iter().zip(gw.chunks_exact_mut(cols)) {
        for (g, &xi) in row.iter_mut().zip(x) {
            *g = *g + d * xi;
        }
    }
}

pub(crate) fn add_assign<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub(crate) fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `logits` against `label`; returns `(loss, softmax)`.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    let p = logits.iter().map(|&v| (v - lse).exp()).collect();
    (lse - logits[label], p)
}

pub(crate) fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Cached quantities of one LayerNorm application.
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: T,
}

/// `y = gain ⊙ (x − mean)/sqrt(var + eps) + bias`, biased variance.
pub(crate) fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> (Vec<T>, LnCache<T>) {
    let n = T::of_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&h, (&g, &b))| g * h + b)
        .collect();
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; accumulates into `dgain`/`dbias`, returns `dx`.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    gain: &[T],
    cache: &LnCache<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let n = T::of_usize(dy.len());
    let mut dxhat = Vec::with_capacity(dy.len());
    for i in 0..dy.len() {
        dgain[i] = dgain[i] + dy[i] * cache.xhat[i];
        dbias[i] = dbias[i] + dy[i];
        dxhat.push(dy[i] * gain[i]);
    }
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dot(&dxhat, &cache.xhat) / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(&d, &h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

/// Two distinct mutable rows of a gradient buffer, `i < j`.
pub(crate) fn pair_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    debug_assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}
