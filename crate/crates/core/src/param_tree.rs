//! Ordered, named, layered parameter container.
//!
//! A [`ParamTree`] holds model parameters, gradients and client deltas alike.
//! Layer order is fixed at construction and preserved by every operation and
//! by serialization. Binary operations require *congruent* trees: same layer
//! names, same order, same per-layer lengths.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One named flat vector of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Layer<T = f64> {
    pub name: String,
    pub values: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        sum_squares(&self.values).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct ParamTree<T = f64> {
    layers: Vec<Layer<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct RawTree<T> {
    layers: Vec<Layer<T>>,
}

impl<'de, T: Real> Deserialize<'de> for ParamTree<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawTree::<T>::deserialize(d)?;
        ParamTree::from_layers(raw.layers).map_err(serde::de::Error::custom)
    }
}

#[inline]
fn sum_squares<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

impl<T: Real> ParamTree<T> {
    /// Builds a tree from `(name, values)` pairs, rejecting duplicate names.
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, Vec<T>)>) -> Result<Self> {
        Self::from_layers(
            layers
                .into_iter()
                .map(|(name, values)| Layer {
                    name: name.into(),
                    values,
                })
                .collect(),
        )
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::structure(&layer.name, "duplicate layer name"));
            }
            if layer.name.is_empty() {
                return Err(Error::structure("", "empty layer name"));
            }
        }
        Ok(Self { layers })
    }

    /// All-zero tree with the given `(name, dim)` layout.
    pub fn zeros<S: AsRef<str>>(layout: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        Self::new(
            layout
                .into_iter()
                .map(|(n, d)| (n.as_ref().to_string(), vec![T::zero(); d])),
        )
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::dim).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::dim).collect()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.layer(name).map(|l| l.values.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .map(|l| &mut l.values)
    }

    /// Iterates over every scalar in layer order.
    pub fn iter_values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.values.iter())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.values.iter_mut())
    }

    /// Errors with the first mismatching layer if `other` is not congruent.
    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.name != b.name {
                return Err(Error::structure(
                    &a.name,
                    format!("layer {i} is named `{}` in the other tree", b.name),
                ));
            }
            if a.dim() != b.dim() {
                return Err(Error::structure(
                    &a.name,
                    format!("dimension {} vs {}", a.dim(), b.dim()),
                ));
            }
        }
        match self.num_layers().cmp(&other.num_layers()) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Greater => Err(Error::structure(
                &self.layers[other.num_layers()].name,
                "missing from the other tree",
            )),
            std::cmp::Ordering::Less => Err(Error::structure(
                &other.layers[self.num_layers()].name,
                "missing from this tree",
            )),
        }
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.check_congruent(other).is_ok()
    }

    /// Global L2 norm over all layers.
    pub fn global_norm(&self) -> T {
        self.layers
            .iter()
            .fold(T::zero(), |acc, l| acc + sum_squares(&l.values))
            .sqrt()
    }

    /// Per-layer L2 norms in layer order.
    pub fn layer_norms(&self) -> Vec<(&str, T)> {
        self.layers
            .iter()
            .map(|l| (l.name.as_str(), l.norm()))
            .collect()
    }

    /// `alpha * x + y`. Inputs are left untouched.
    pub fn axpy(alpha: T, x: &Self, y: &Self) -> Result<Self> {
        x.check_congruent(y)?;
        let layers = x
            .layers
            .iter()
            .zip(&y.layers)
            .map(|(lx, ly)| Layer {
                name: lx.name.clone(),
                values: lx
                    .values
                    .iter()
                    .zip(&ly.values)
                    .map(|(&a, &b)| alpha * a + b)
                    .collect(),
            })
            .collect();
        Ok(Self { layers })
    }

    /// In-place `self += alpha * x`.
    pub fn axpy_assign(&mut self, alpha: T, x: &Self) -> Result<()> {
        self.check_congruent(x)?;
        for (ly, lx) in self.layers.iter_mut().zip(&x.layers) {
            for (b, &a) in ly.values.iter_mut().zip(&lx.values) {
                *b = alpha * a + *b;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::axpy(T::one(), other, self)
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    values: l.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        self.check_congruent(other)?;
        Ok(Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| Layer {
                    name: a.name.clone(),
                    values: a
                        .values
                        .iter()
                        .zip(&b.values)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                })
                .collect(),
        })
    }

    /// Unweighted mean of congruent trees, summed in slice order.
    pub fn mean(trees: &[Self]) -> Result<Self> {
        let (first, rest) = trees
            .split_first()
            .ok_or_else(|| Error::Domain("mean of an empty list of trees".into()))?;
        let mut acc = first.clone();
        for t in rest {
            acc.axpy_assign(T::one(), t)?;
        }
        let inv = T::one() / T::of_usize(trees.len());
        Ok(acc.map(|v| v * inv))
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(|v| v.is_finite())
    }

    /// Casts every element to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamTree<U> {
        ParamTree {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    values: l.values.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ParamTree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "parameter tree JSON".into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(layers: &[(&str, &[f64])]) -> ParamTree {
        ParamTree::new(layers.iter().map(|(n, v)| (*n, v.to_vec()))).unwrap()
    }

    #[test]
    fn global_norm_three_four_five() {
        assert_eq!(tree(&[("a", &[3.0]), ("b", &[4.0])]).global_norm(), 5.0);
        assert_eq!(tree(&[("a", &[0.0; 4]), ("b", &[0.0])]).global_norm(), 0.0);
    }

    #[test]
    fn layer_norms_in_order() {
        let t = tree(&[("a", &[3.0, 4.0]), ("b", &[0.0])]);
        assert_eq!(t.layer_norms(), vec![("a", 5.0), ("b", 0.0)]);
    }

    #[test]
    fn axpy_identities() {
        let x = tree(&[("a", &[1.0, -2.0]), ("b", &[3.0])]);
        let y = tree(&[("a", &[5.0, 6.0]), ("b", &[-7.0])]);
        assert_eq!(ParamTree::axpy(0.0, &x, &y).unwrap(), y);
        assert_eq!(ParamTree::axpy(1.0, &x, &x.zeros_like()).unwrap(), x);
        let z = ParamTree::axpy(-1.0, &x, &x).unwrap();
        assert!(z.iter_values().all(|&v| v == 0.0));
    }

    #[test]
    fn non_congruent_names_first_mismatch() {
        let x = tree(&[("a", &[1.0]), ("b", &[1.0, 2.0])]);
        let y = tree(&[("a", &[1.0]), ("b", &[1.0])]);
        match ParamTree::axpy(1.0, &x, &y) {
            Err(Error::Structure { layer, .. }) => assert_eq!(layer, "b"),
            other => panic!("expected structure error, got {other:?}"),
        }
        let y = tree(&[("a", &[1.0]), ("c", &[1.0, 2.0])]);
        assert!(matches!(x.sub(&y), Err(Error::Structure { layer, .. }) if layer == "b"));
        let y = tree(&[("a", &[1.0])]);
        assert!(matches!(x.check_congruent(&y), Err(Error::Structure { layer, .. }) if layer == "b"));
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(ParamTree::new(vec![("a", vec![1.0f64]), ("a", vec![2.0])]).is_err());
    }

    #[test]
    fn json_preserves_order() {
        let t = tree(&[("z", &[1.5]), ("a", &[-0.25, 2.0]), ("m", &[])]);
        let s = t.to_json();
        assert!(s.starts_with(r#"{"layers":[{"name":"z","values":[1.5]}"#));
        assert_eq!(ParamTree::from_json(&s).unwrap(), t);
        assert!(ParamTree::<f64>::from_json(r#"{"layers":[{"name":"a","values":[1]},{"name":"a","values":[2]}]}"#).is_err());
    }

    #[test]
    fn mean_of_copies_and_opposites() {
        let d = tree(&[("a", &[0.5, -1.0]), ("b", &[2.0])]);
        assert_eq!(ParamTree::mean(&[d.clone(), d.clone(), d.clone()]).unwrap(), d);
        let m = ParamTree::mean(&[d.clone(), d.scale(-1.0)]).unwrap();
        assert!(m.iter_values().all(|&v| v == 0.0));
        assert_eq!(ParamTree::mean(std::slice::from_ref(&d)).unwrap(), d);
    }

    #[test]
    fn f32_tree_works() {
        let t = ParamTree::<f32>::new(vec![("a", vec![3.0f32]), ("b", vec![4.0])]).unwrap();
        assert_eq!(t.global_norm(), 5.0f32);
    }

    fn arb_tree() -> impl Strategy<Value = ParamTree> {
        prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 0..12), 1..6).prop_map(|ls| {
            ParamTree::new(ls.into_iter().enumerate().map(|(i, v)| (format!("l{i}"), v))).unwrap()
        })
    }

    proptest! {
        #[test]
        fn global_norm_squared_is_sum_of_layer_norms_squared(t in arb_tree()) {
            let g = t.global_norm();
            let s: f64 = t.layer_norms().iter().map(|(_, n)| n * n).sum();
            prop_assert!((g * g - s).abs() <= 1e-12 * s.max(f64::MIN_POSITIVE));
            // flat scalar-loop oracle
            let mut acc = 0.0;
            for l in t.layers() { for v in &l.values { acc += v * v; } }
            prop_assert!((g - acc.sqrt()).abs() <= 1e-12 * g.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn axpy_exact_on_integers(a in -50i32..50, xs in prop::collection::vec(-1000i32..1000, 1..10), ys in prop::collection::vec(-1000i32..1000, 1..10)) {
            let n = xs.len().min(ys.len());
            let x = ParamTree::new(vec![("w", xs[..n].iter().map(|&v| v as f64).collect())]).unwrap();
            let y = ParamTree::new(vec![("w", ys[..n].iter().map(|&v| v as f64).collect())]).unwrap();
            let r = ParamTree::axpy(a as f64, &x, &y).unwrap();
            prop_assert!(r.is_congruent(&x));
            for i in 0..n {
                prop_assert_eq!(r.get("w").unwrap()[i], (a * xs[i] + ys[i]) as f64);
            }
        }
    }
}
