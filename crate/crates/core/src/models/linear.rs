use super::ops::{argmax, cross_entropy, matvec, outer_acc};
use super::ModelSpec;
use crate::scalar::Real;

const W: usize = 0;
const B: usize = 1;

pub(super) fn layout(spec: &ModelSpec) -> Vec<(String, usize)> {
    vec![
        ("w".into(), spec.num_classes * spec.input_dim),
        ("b".into(), spec.num_classes),
    ]
}

pub(super) fn fan_in(spec: &ModelSpec, layer: &str) -> Option<usize> {
    (layer == "w").then_some(spec.input_dim)
}

pub(super) fn example<T: Real>(
    spec: &ModelSpec,
    p: &[&[T]],
    x: &[T],
    label: usize,
    grads: Option<&mut [Vec<T>]>,
) -> (T, usize) {
    let mut z = vec![T::zero(); spec.num_classes];
    matvec(p[W], x, &mut z);
    for (zi, &bi) in z.iter_mut().zip(p[B]) {
        *zi = *zi + bi;
    }
    let (loss, mut probs) = cross_entropy(&z, label);
    if let Some(g) = grads {
        probs[label] = probs[label] - T::one();
        outer_acc(&mut g[W], &probs, x);
        super::ops::add_assign(&mut g[B], &probs);
    }
    (loss, argmax(&z))
}
