//! Global and per-layer L2 clipping of gradients and client deltas.
//!
//! Per-layer variants split a total bound `C` into layer bounds `Cᵢ` with
//! `Σ Cᵢ² = C²`, so a per-layer clipped tree still has global norm ≤ `C`:
//!
//! * `uniform`:  `Cᵢ = C / √K`
//! * `dim`:      `Cᵢ = C · √(Dᵢ / Σⱼ Dⱼ)`
//! * `weighted`: `Cᵢ = C · √(αᵢDᵢ / Σⱼ αⱼDⱼ)`
//!
//! `Dᵢ` is the parameter count of layer `i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_tree::ParamTree;
use crate::scalar::{ext_float, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipVariant {
    Global,
    Uniform,
    Dim,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct ClipSpec<T = f64> {
    #[serde(with = "ext_float")]
    pub bound: T,
    pub variant: ClipVariant,
    /// Layer weights `αᵢ`; required by, and only read by, `weighted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, T>>,
}

impl<T: Real> ClipSpec<T> {
    pub fn global(bound: T) -> Self {
        Self {
            bound,
            variant: ClipVariant::Global,
            weights: None,
        }
    }

    pub fn uniform(bound: T) -> Self {
        Self {
            variant: ClipVariant::Uniform,
            ..Self::global(bound)
        }
    }

    pub fn dim(bound: T) -> Self {
        Self {
            variant: ClipVariant::Dim,
            ..Self::global(bound)
        }
    }

    pub fn weighted(bound: T, weights: BTreeMap<String, T>) -> Self {
        Self {
            bound,
            variant: ClipVariant::Weighted,
            weights: Some(weights),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound >= T::zero()) {
            return Err(Error::config("clip.bound", "must be nonnegative"));
        }
        match (&self.weights, self.variant) {
            (None, ClipVariant::Weighted) => Err(Error::config("clip.weights", "required by the weighted variant")),
            (Some(w), ClipVariant::Weighted) => match w.iter().find(|(_, &a)| !(a > T::zero()) || !a.is_finite()) {
                Some((name, _)) => Err(Error::config(format!("clip.weights.{name}"), "must be positive and finite")),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Clip `t` according to this spec (global or per-layer).
    pub fn apply(&self, t: &ParamTree<T>) -> Result<ParamTree<T>> {
        match self.variant {
            ClipVariant::Global => Ok(clip_global(t, self.bound)),
            _ => clip_per_layer(t, self),
        }
    }
}

/// Scales `v` in place to norm at most `c`; returns whether it changed.
///
/// A vector already within the bound (including the zero vector) is left
/// bitwise untouched. After scaling, the computed norm is guaranteed `≤ c`,
/// which makes clipping idempotent.
fn clip_slices<T: Real>(parts: &mut [&mut [T]], c: T) -> bool {
    let sq = |parts: &[&mut [T]]| {
        parts
            .iter()
            .flat_map(|p| p.iter())
            .fold(T::zero(), |a, &x| a + x * x)
            .sqrt()
    };
    let n = sq(parts);
    if n <= c {
        return false;
    }
    let orig: Vec<Vec<T>> = parts.iter().map(|p| p.to_vec()).collect();
    let mut factor = c / n;
    loop {
        for (p, o) in parts.iter_mut().zip(&orig) {
            for (x, &y) in p.iter_mut().zip(o) {
                *x = y * factor;
            }
        }
        if sq(parts) <= c {
            return true;
        }
        // rounding left the norm a few ulps above c
        factor = factor * (T::one() - T::epsilon() * T::of(4.0));
    }
}

/// `t · min(1, C/‖t‖)` over the whole tree.
pub fn clip_global<T: Real>(t: &ParamTree<T>, c: T) -> ParamTree<T> {
    let mut out = t.clone();
    let mut parts: Vec<&mut [T]> = out.layers_mut().iter_mut().map(|l| l.values.as_mut_slice()).collect();
    clip_slices(&mut parts, c);
    out
}

/// Per-layer bounds `Cᵢ` for `t`'s layout, in layer order.
pub fn layer_bounds<T: Real>(t: &ParamTree<T>, spec: &ClipSpec<T>) -> Result<Vec<T>> {
    let k = t.num_layers();
    let c = spec.bound;
    match spec.variant {
        ClipVariant::Global => Err(Error::config(
            "clip.variant",
            "per-layer bounds requested for the global variant",
        )),
        ClipVariant::Uniform => {
            if k == 0 {
                return Ok(Vec::new());
            }
            Ok(vec![c / T::of_usize(k).sqrt(); k])
        }
        ClipVariant::Dim => {
            let dims = t.dims();
            let total: usize = dims.iter().sum();
            if total == 0 {
                return Err(Error::config("clip.variant", "dim variant on a tree without parameters"));
            }
            let total = T::of_usize(total);
            Ok(dims.iter().map(|&d| c * (T::of_usize(d) / total).sqrt()).collect())
        }
        ClipVariant::Weighted => {
            let weights = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::config("clip.weights", "required by the weighted variant"))?;
            let mut mass = Vec::with_capacity(k);
            for layer in t.layers() {
                let a = *weights.get(&layer.name).ok_or_else(|| {
                    Error::config(format!("clip.weights.{}", layer.name), "missing weight for layer")
                })?;
                mass.push(a * T::of_usize(layer.dim()));
            }
            if let Some(extra) = weights.keys().find(|n| t.layer(n).is_none()) {
                return Err(Error::config(format!("clip.weights.{extra}"), "no such layer in the model"));
            }
            let total: T = mass.iter().copied().sum();
            if !(total > T::zero()) {
                return Err(Error::config("clip.weights", "total weighted dimension must be positive"));
            }
            Ok(mass.into_iter().map(|m| c * (m / total).sqrt()).collect())
        }
    }
}

/// Clips every layer independently to its bound `Cᵢ`.
pub fn clip_per_layer<T: Real>(t: &ParamTree<T>, spec: &ClipSpec<T>) -> Result<ParamTree<T>> {
    let bounds = layer_bounds(t, spec)?;
    let mut out = t.clone();
    for (layer, c) in out.layers_mut().iter_mut().zip(bounds) {
        clip_slices(&mut [layer.values.as_mut_slice()], c);
    }
    Ok(out)
}
