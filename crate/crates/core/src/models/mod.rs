//! Small differentiable classifiers with analytic gradients.
//!
//! Three architectures stand in for a large transformer at desk scale:
//!
//! * [`ModelKind::LinearSoftmax`]: multinomial logistic regression.
//! * [`ModelKind::MlpLayerNorm`]: one hidden layer, LayerNorm, tanh.
//! * [`ModelKind::TinyAttention`]: one pre-LayerNorm transformer block
//!   (single-head attention + MLP), mean pooling, linear head.
//!
//! All losses are mean cross-entropy over the batch. Gradients are written
//! out by hand and checked against central finite differences in the tests.

mod attention;
mod linear;
mod mlp;
pub(crate) mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_tree::ParamTree;
use crate::scalar::Real;

pub use attention::TINY_ATTENTION_GROUPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearSoftmax,
    MlpLayerNorm,
    TinyAttention,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_seq_len() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Width of the hidden representation; ignored by `LinearSoftmax`.
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Tokens per example; only `TinyAttention` reads more than one.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_ln_eps")]
    pub layernorm_epsilon: f64,
}

impl ModelSpec {
    pub fn linear_softmax(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            hidden_dim: 0,
            num_classes,
            seq_len: 1,
            layernorm_epsilon: default_ln_eps(),
        }
    }

    pub fn mlp_layer_norm(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::MlpLayerNorm,
            hidden_dim,
            ..Self::linear_softmax(input_dim, num_classes)
        }
    }

    pub fn tiny_attention(input_dim: usize, hidden_dim: usize, num_classes: usize, seq_len: usize) -> Self {
        Self {
            kind: ModelKind::TinyAttention,
            hidden_dim,
            seq_len,
            ..Self::linear_softmax(input_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        if self.kind != ModelKind::LinearSoftmax && self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be positive for this model kind"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("model.seq_len", "must be positive"));
        }
        if self.kind != ModelKind::TinyAttention && self.seq_len != 1 {
            return Err(Error::config("model.seq_len", "only tiny_attention consumes sequences; use 1"));
        }
        if !(self.layernorm_epsilon > 0.0) {
            return Err(Error::config("model.layernorm_epsilon", "must be positive"));
        }
        Ok(())
    }

    /// Scalars per example (`seq_len × input_dim`).
    pub fn example_len(&self) -> usize {
        self.seq_len * self.input_dim
    }

    /// `(name, parameter count)` for every layer, in tree order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        match self.kind {
            ModelKind::LinearSoftmax => linear::layout(self),
            ModelKind::MlpLayerNorm => mlp::layout(self),
            ModelKind::TinyAttention => attention::layout(self),
        }
    }

    /// Fan-in of a weight layer; `None` for biases and LayerNorm parameters.
    fn fan_in(&self, layer: &str) -> Option<usize> {
        match self.kind {
            ModelKind::LinearSoftmax => linear::fan_in(self, layer),
            ModelKind::MlpLayerNorm => mlp::fan_in(self, layer),
            ModelKind::TinyAttention => attention::fan_in(self, layer),
        }
    }
}

/// Parameter group of a layer name: the part before the first `.`.
///
/// `ln1.gain` and `ln1.bias` both belong to `ln1`; `wqkv` is its own group.
pub fn layer_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// A labelled mini-batch; inputs are stored flat, `example_len` scalars each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Batch<T = f64> {
    pub inputs: Vec<T>,
    pub labels: Vec<usize>,
    pub example_len: usize,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Vec<T>, labels: Vec<usize>, example_len: usize) -> Result<Self> {
        if example_len == 0 || inputs.len() != labels.len() * example_len {
            return Err(Error::structure(
                "batch",
                format!(
                    "{} input scalars for {} labels of length {example_len}",
                    inputs.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            example_len,
        })
    }

    pub fn empty(example_len: usize) -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
            example_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[T] {
        &self.inputs[i * self.example_len..(i + 1) * self.example_len]
    }

    pub fn push(&mut self, x: &[T], label: usize) {
        debug_assert_eq!(x.len(), self.example_len);
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    /// Sub-batch made of the examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.example_len);
        for &i in indices {
            out.push(self.example(i), self.labels[i]);
        }
        out
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        if self.example_len != spec.example_len() {
            return Err(Error::structure(
                "batch",
                format!(
                    "example length {} but model expects {}",
                    self.example_len,
                    spec.example_len()
                ),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= spec.num_classes) {
            return Err(Error::structure(
                "batch",
                format!("label {bad} outside [0, {})", spec.num_classes),
            ));
        }
        Ok(())
    }
}

/// Deterministic initialization: weights `N(0,1)/sqrt(fan_in)`, LayerNorm gains
/// one, every bias zero.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> ParamTree<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let layers = spec.layout().into_iter().map(|(name, dim)| {
        let values = if name.ends_with(".gain") {
            vec![T::one(); dim]
        } else if let Some(fan_in) = spec.fan_in(&name) {
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z * scale)
                })
                .collect()
        } else {
            vec![T::zero(); dim]
        };
        (name, values)
    });
    ParamTree::new(layers).expect("model layouts have unique names")
}

fn check_params<T: Real>(spec: &ModelSpec, params: &ParamTree<T>) -> Result<()> {
    let layout = spec.layout();
    if layout.len() != params.num_layers() {
        return Err(Error::structure(
            params
                .layers()
                .get(layout.len())
                .map(|l| l.name.as_str())
                .or_else(|| layout.get(params.num_layers()).map(|(n, _)| n.as_str()))
                .unwrap_or("?"),
            format!("model expects {} layers, tree has {}", layout.len(), params.num_layers()),
        ));
    }
    for ((name, dim), layer) in layout.iter().zip(params.layers()) {
        if *name != layer.name || *dim != layer.dim() {
            return Err(Error::structure(
                &layer.name,
                format!("model expects `{name}` with {dim} parameters, found {}", layer.dim()),
            ));
        }
    }
    Ok(())
}

/// Per-example forward (and optionally backward) pass shared by all kinds.
///
/// Returns `(loss, predicted class)`; when `grads` is given, the gradient of
/// this example's loss is added into it.
fn example_pass<T: Real>(
    spec: &ModelSpec,
    p: &[&[T]],
    x: &[T],
    label: usize,
    grads: Option<&mut [Vec<T>]>,
) -> (T, usize) {
    match spec.kind {
        ModelKind::LinearSoftmax => linear::example(spec, p, x, label, grads),
        ModelKind::MlpLayerNorm => mlp::example(spec, p, x, label, grads),
        ModelKind::TinyAttention => attention::example(spec, p, x, label, grads),
    }
}

fn param_slices<T: Real>(params: &ParamTree<T>) -> Vec<&[T]> {
    params.layers().iter().map(|l| l.values.as_slice()).collect()
}

/// Mean cross-entropy of `params` on `batch`.
pub fn loss<T: Real>(spec: &ModelSpec, params: &ParamTree<T>, batch: &Batch<T>) -> Result<T> {
    Ok(evaluate(spec, params, batch)?.0)
}

/// `(mean loss, accuracy)` on `batch`.
pub fn evaluate<T: Real>(spec: &ModelSpec, params: &ParamTree<T>, batch: &Batch<T>) -> Result<(T, T)> {
    check_params(spec, params)?;
    batch.check(spec)?;
    let p = param_slices(params);
    let mut total = T::zero();
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let (l, pred) = example_pass(spec, &p, batch.example(i), batch.labels[i], None);
        total = total + l;
        correct += usize::from(pred == batch.labels[i]);
    }
    let n = T::of_usize(batch.len());
    Ok((total / n, T::of_usize(correct) / n))
}

/// Mean loss and its analytic gradient, congruent with `params`.
pub fn loss_and_grad<T: Real>(
    spec: &ModelSpec,
    params: &ParamTree<T>,
    batch: &Batch<T>,
) -> Result<(T, ParamTree<T>)> {
    check_params(spec, params)?;
    batch.check(spec)?;
    let p = param_slices(params);
    let mut g: Vec<Vec<T>> = params.layers().iter().map(|l| vec![T::zero(); l.dim()]).collect();
    let mut total = T::zero();
    for i in 0..batch.len() {
        let (l, _) = example_pass(spec, &p, batch.example(i), batch.labels[i], Some(&mut g));
        total = total + l;
    }
    let inv = T::one() / T::of_usize(batch.len());
    let grad = ParamTree::new(
        params
            .names()
            .zip(g)
            .map(|(n, v)| (n.to_string(), v.into_iter().map(|x| x * inv).collect())),
    )
    .expect("names come from a valid tree");
    Ok((total * inv, grad))
}

/// Analytic gradient of the mean loss.
pub fn grad<T: Real>(spec: &ModelSpec, params: &ParamTree<T>, batch: &Batch<T>) -> Result<ParamTree<T>> {
    Ok(loss_and_grad(spec, params, batch)?.1)
}

/// Central-difference gradient, one coordinate at a time. Test oracle; cost
/// is two full loss evaluations per parameter.
///
/// Large `h` (e.g. 1.0) is allowed and simply inaccurate.
pub fn finite_diff_grad<T: Real>(
    spec: &ModelSpec,
    params: &ParamTree<T>,
    batch: &Batch<T>,
    h: T,
) -> Result<ParamTree<T>> {
    if !(h > T::zero()) {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    check_params(spec, params)?;
    batch.check(spec)?;
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let two_h = h + h;
    for li in 0..params.num_layers() {
        for j in 0..params.layers()[li].dim() {
            let orig = params.layers()[li].values[j];
            work.layers_mut()[li].values[j] = orig + h;
            let up = loss(spec, &work, batch)?;
            work.layers_mut()[li].values[j] = orig - h;
            let down = loss(spec, &work, batch)?;
            work.layers_mut()[li].values[j] = orig;
            out.layers_mut()[li].values[j] = (up - down) / two_h;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut b = Batch::empty(spec.example_len());
        for _ in 0..n {
            let x: Vec<f64> = (0..spec.example_len()).map(|_| rng.random_range(-1.5..1.5)).collect();
            b.push(&x, rng.random_range(0..spec.num_classes));
        }
        b
    }

    fn perturbed_params(spec: &ModelSpec, seed: u64) -> ParamTree {
        // push LayerNorm gains/biases and zero biases away from their init
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xABCD);
        init_params::<f64>(spec, seed).map(|v| v + rng.random_range(-0.3..0.3))
    }

    fn all_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::linear_softmax(5, 4),
            ModelSpec::mlp_layer_norm(4, 6, 3),
            ModelSpec::tiny_attention(3, 4, 3, 3),
        ]
    }

    /// Max over coordinates of |a − f| / max(|a|, |f|, 1e-6).
    fn max_rel_err(a: &ParamTree, f: &ParamTree) -> f64 {
        a.iter_values()
            .zip(f.iter_values())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        for spec in all_specs() {
            let a = init_params::<f64>(&spec, 11);
            let b = init_params::<f64>(&spec, 11);
            assert_eq!(a, b);
            let c = init_params::<f64>(&spec, 12);
            assert_ne!(a, c);
            for l in a.layers() {
                if l.name.ends_with(".gain") {
                    assert!(l.values.iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn tiny_attention_groups() {
        let spec = ModelSpec::tiny_attention(3, 4, 2, 2);
        let params = init_params::<f64>(&spec, 0);
        let groups: std::collections::BTreeSet<&str> = params.names().map(layer_group).collect();
        for g in TINY_ATTENTION_GROUPS {
            assert!(groups.contains(g), "missing group {g}");
        }
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let spec = ModelSpec::linear_softmax(3, 4);
        let params = init_params::<f64>(&spec, 0).zeros_like();
        let b = random_batch(&spec, 7, 3);
        assert!((loss(&spec, &params, &b).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicate_batch_keeps_loss_and_permutation_invariance() {
        for spec in all_specs() {
            let params = perturbed_params(&spec, 4);
            let b = random_batch(&spec, 5, 9);
            let idx: Vec<usize> = (0..5).chain(0..5).collect();
            let l1 = loss(&spec, &params, &b).unwrap();
            let l2 = loss(&spec, &params, &b.select(&idx)).unwrap();
            assert!((l1 - l2).abs() < 1e-13);
            let perm = b.select(&[3, 1, 4, 0, 2]);
            let g1 = grad(&spec, &params, &b).unwrap();
            let g2 = grad(&spec, &params, &perm).unwrap();
            assert!(max_rel_err(&g1, &g2) < 1e-10);
        }
    }

    #[test]
    fn linear_softmax_gradient_at_zero_is_closed_form() {
        let spec = ModelSpec::linear_softmax(3, 4);
        let params = init_params::<f64>(&spec, 0).zeros_like();
        let b = random_batch(&spec, 6, 1);
        let g = grad(&spec, &params, &b).unwrap();
        let (c, d) = (4, 3);
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        for i in 0..b.len() {
            for k in 0..c {
                let r = 0.25 - if b.labels[i] == k { 1.0 } else { 0.0 };
                gb[k] += r / 6.0;
                for j in 0..d {
                    gw[k * d + j] += r * b.example(i)[j] / 6.0;
                }
            }
        }
        for (a, e) in g.get("w").unwrap().iter().zip(&gw) {
            assert!((a - e).abs() < 1e-15);
        }
        for (a, e) in g.get("b").unwrap().iter().zip(&gb) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_and_bad_shapes_rejected() {
        let spec = ModelSpec::linear_softmax(3, 4);
        let params = init_params::<f64>(&spec, 0);
        assert!(matches!(grad(&spec, &params, &Batch::empty(3)), Err(Error::Domain(_))));
        let wrong = random_batch(&ModelSpec::linear_softmax(2, 4), 2, 0);
        assert!(matches!(loss(&spec, &params, &wrong), Err(Error::Structure { .. })));
        let other = init_params::<f64>(&ModelSpec::linear_softmax(3, 5), 0);
        assert!(matches!(loss(&spec, &other, &random_batch(&spec, 2, 0)), Err(Error::Structure { .. })));
    }

    #[test]
    fn analytic_matches_finite_differences_small_params() {
        let spec = ModelSpec::linear_softmax(4, 3);
        let params = init_params::<f64>(&spec, 5).scale(0.05);
        let b = random_batch(&spec, 8, 2);
        let g = grad(&spec, &params, &b).unwrap();
        let f = finite_diff_grad(&spec, &params, &b, 1e-5).unwrap();
        for (x, y) in g.iter_values().zip(f.iter_values()) {
            assert!((x - y).abs() < 1e-6);
        }
        // a coarse step still runs; it is merely less accurate
        let coarse = finite_diff_grad(&spec, &params, &b, 1.0).unwrap();
        assert!(coarse.all_finite());
    }

    #[test]
    fn symmetric_problem_gives_symmetric_gradient() {
        // two classes, inputs mirrored: x with label 0, -x with label 1, zero params
        let spec = ModelSpec::linear_softmax(2, 2);
        let params = init_params::<f64>(&spec, 0).zeros_like();
        let b = Batch::new(vec![1.0, 2.0, -1.0, -2.0], vec![0, 1], 2).unwrap();
        let g = grad(&spec, &params, &b).unwrap();
        let w = g.get("w").unwrap();
        assert_eq!(w[0], -w[2]);
        assert_eq!(w[1], -w[3]);
    }

    #[test]
    fn gradients_match_finite_differences_every_kind() {
        for spec in all_specs() {
            for case in 0..5 {
                let params = perturbed_params(&spec, 100 + case);
                let b = random_batch(&spec, 4, 200 + case);
                let g = grad(&spec, &params, &b).unwrap();
                let f = finite_diff_grad(&spec, &params, &b, 1e-5).unwrap();
                let err = max_rel_err(&g, &f);
                assert!(err < 1e-4, "{:?} case {case}: {err}", spec.kind);
            }
        }
    }

    #[test]
    fn f32_models_run() {
        let spec = ModelSpec::tiny_attention(3, 4, 3, 2);
        let params = init_params::<f32>(&spec, 1);
        let mut b = Batch::<f32>::empty(spec.example_len());
        b.push(&[0.1, 0.2, -0.3, 0.5, 0.0, 1.0], 2);
        let (l, g) = loss_and_grad(&spec, &params, &b).unwrap();
        assert!(l.is_finite() && g.all_finite());
    }
}
