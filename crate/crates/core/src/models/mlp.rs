use super::ops::{add_assign, argmax, cross_entropy, layer_norm, layer_norm_backward, matvec, matvec_t_acc, outer_acc};
use super::ModelSpec;
use crate::scalar::Real;

const W1: usize = 0;
const B1: usize = 1;
const LN_GAIN: usize = 2;
const LN_BIAS: usize = 3;
const W2: usize = 4;
const B2: usize = 5;

pub(super) fn layout(spec: &ModelSpec) -> Vec<(String, usize)> {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    vec![
        ("w1".into(), h * d),
        ("b1".into(), h),
        ("ln.gain".into(), h),
        ("ln.bias".into(), h),
        ("w2".into(), c * h),
        ("b2".into(), c),
    ]
}

pub(super) fn fan_in(spec: &ModelSpec, layer: &str) -> Option<usize> {
    match layer {
        "w1" => Some(spec.input_dim),
        "w2" => Some(spec.hidden_dim),
        _ => None,
    }
}

/// `x → W1 x + b1 → LayerNorm → tanh → W2 · + b2`.
pub(super) fn example<T: Real>(
    spec: &ModelSpec,
    p: &[&[T]],
    x: &[T],
    label: usize,
    grads: Option<&mut [Vec<T>]>,
) -> (T, usize) {
    let eps = T::of(spec.layernorm_epsilon);
    let mut h = vec![T::zero(); spec.hidden_dim];
    matvec(p[W1], x, &mut h);
    add_assign(&mut h, p[B1]);
    let (n, cache) = layer_norm(&h, p[LN_GAIN], p[LN_BIAS], eps);
    let a: Vec<T> = n.iter().map(|v| v.tanh()).collect();
    let mut z = vec![T::zero(); spec.num_classes];
    matvec(p[W2], &a, &mut z);
    add_assign(&mut z, p[B2]);
    let (loss, mut dz) = cross_entropy(&z, label);

    if let Some(g) = grads {
        dz[label] = dz[label] - T::one();
        outer_acc(&mut g[W2], &dz, &a);
        add_assign(&mut g[B2], &dz);
        let mut da = vec![T::zero(); spec.hidden_dim];
        matvec_t_acc(p[W2], &dz, &mut da);
        let dn: Vec<T> = da.iter().zip(&a).map(|(&d, &v)| d * (T::one() - v * v)).collect();
        let (g_lo, g_hi) = g.split_at_mut(LN_BIAS);
        let dh = layer_norm_backward(&dn, p[LN_GAIN], &cache, &mut g_lo[LN_GAIN], &mut g_hi[0]);
        outer_acc(&mut g[W1], &dh, x);
        add_assign(&mut g[B1], &dh);
    }
    (loss, argmax(&z))
}
