//! Gaussian noise on client deltas and the noise-parametrization algebra.
//!
//! Three equivalent ways of stating the noise level for a cohort of `L`
//! clients:
//!
//! * `client`: std of the noise each client adds to its own delta,
//! * `avg`:    std of the noise on the averaged delta,
//! * `sum`:    std of the noise on the summed delta,
//!
//! related by `σ_sum = σ_avg · L` and `σ_client = σ_avg · √L`. The privacy
//! accountant consumes the noise multiplier `z = σ_avg / S` with sensitivity
//! `S = C / (qN)`.

use std::collections::BTreeSet;

use num_traits::{Float, Num};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_tree::ParamTree;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    Client,
    Avg,
    Sum,
}

impl SigmaKind {
    pub const ALL: [SigmaKind; 3] = [SigmaKind::Client, SigmaKind::Avg, SigmaKind::Sum];
}

impl std::str::FromStr for SigmaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "client" => Ok(Self::Client),
            "avg" | "average" => Ok(Self::Avg),
            "sum" => Ok(Self::Sum),
            other => Err(Error::config("sigma_kind", format!("unknown kind `{other}` (client|avg|sum)"))),
        }
    }
}

/// Converts a noise std between parametrizations for a cohort of `cohort` clients.
pub fn convert_noise<F: Float>(sigma: F, from: SigmaKind, to: SigmaKind, cohort: F) -> F {
    if from == to {
        return sigma;
    }
    let avg = match from {
        SigmaKind::Avg => sigma,
        SigmaKind::Sum => sigma / cohort,
        SigmaKind::Client => sigma / cohort.sqrt(),
    };
    match to {
        SigmaKind::Avg => avg,
        SigmaKind::Sum => avg * cohort,
        SigmaKind::Client => avg * cohort.sqrt(),
    }
}

/// Sensitivity `S = C / (qN)` of the averaged delta.
///
/// Generic over any numeric field, so it can be evaluated exactly over
/// rationals as well as in floating point.
pub fn sensitivity<N: Num + Clone>(clip: N, q: N, population: N) -> Result<N> {
    let qn = q * population;
    if qn.is_zero() {
        return Err(Error::Domain("sensitivity undefined for q·N = 0".into()));
    }
    if clip.is_zero() {
        return Err(Error::Domain("sensitivity is zero for C = 0".into()));
    }
    Ok(clip / qn)
}

/// Noise multiplier `z = σ_avg / S = σ_avg · qN / C`.
pub fn noise_multiplier<N: Num + Clone>(sigma_avg: N, clip: N, q: N, population: N) -> Result<N> {
    let s = sensitivity(clip, q, population)?;
    Ok(sigma_avg / s)
}

/// Privacy-relevant parameters of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Clipping bound `C` on each client delta.
    pub clip: f64,
    pub sigma: f64,
    pub sigma_kind: SigmaKind,
    /// Per-round client sampling probability.
    pub q: f64,
    /// Population size `N`.
    pub population: u64,
    /// Cohort size `L`; the noise parametrizations are converted with it.
    pub cohort: f64,
    /// Central steps `T`.
    pub steps: u64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn sigma_as(&self, kind: SigmaKind) -> f64 {
        convert_noise(self.sigma, self.sigma_kind, kind, self.cohort)
    }

    pub fn sigma_avg(&self) -> f64 {
        self.sigma_as(SigmaKind::Avg)
    }

    pub fn sigma_client(&self) -> f64 {
        self.sigma_as(SigmaKind::Client)
    }

    pub fn sensitivity(&self) -> Result<f64> {
        sensitivity(self.clip, self.q, self.population as f64)
    }

    /// `z = σ_avg · qN / C`; zero when no noise is added.
    pub fn noise_multiplier(&self) -> Result<f64> {
        noise_multiplier(self.sigma_avg(), self.clip, self.q, self.population as f64)
    }
}

/// Which layers receive noise. Anything short of every layer is an ablation
/// and voids the DP guarantee.
///
/// Serialized as the string `"all"` or as a list of layer names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub enum NoiseMask {
    #[default]
    All,
    Layers(BTreeSet<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRepr {
    Keyword(String),
    Layers(BTreeSet<String>),
}

impl TryFrom<MaskRepr> for NoiseMask {
    type Error = String;

    fn try_from(r: MaskRepr) -> Result<Self, String> {
        match r {
            MaskRepr::Keyword(k) if k == "all" => Ok(NoiseMask::All),
            MaskRepr::Keyword(k) => Err(format!("expected \"all\" or a list of layer names, got \"{k}\"")),
            MaskRepr::Layers(s) => Ok(NoiseMask::Layers(s)),
        }
    }
}

impl From<NoiseMask> for MaskRepr {
    fn from(m: NoiseMask) -> Self {
        match m {
            NoiseMask::All => MaskRepr::Keyword("all".into()),
            NoiseMask::Layers(s) => MaskRepr::Layers(s),
        }
    }
}

impl NoiseMask {
    pub fn layers<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        NoiseMask::Layers(names.into_iter().map(Into::into).collect())
    }

    pub fn includes(&self, layer: &str) -> bool {
        match self {
            NoiseMask::All => true,
            NoiseMask::Layers(s) => s.contains(layer),
        }
    }

    /// Rejects names absent from `tree`.
    pub fn check<T: Real>(&self, tree: &ParamTree<T>) -> Result<()> {
        if let NoiseMask::Layers(s) = self {
            if let Some(bad) = s.iter().find(|n| tree.layer(n).is_none()) {
                return Err(Error::structure(bad.as_str(), "noise mask names a layer the tree does not have"));
            }
        }
        Ok(())
    }

    /// True when every layer of `tree` receives noise.
    pub fn covers<T: Real>(&self, tree: &ParamTree<T>) -> bool {
        tree.names().all(|n| self.includes(n))
    }
}

/// Adds i.i.d. `N(0, σ_client²)` noise to every coordinate of the masked layers.
///
/// Draws come from a ChaCha12 stream seeded with `seed`; the same seed always
/// yields the same noise. `σ_client = 0` returns `delta` unchanged.
pub fn add_noise<T: Real>(delta: &ParamTree<T>, sigma_client: T, mask: &NoiseMask, seed: u64) -> Result<ParamTree<T>> {
    mask.check(delta)?;
    if !(sigma_client >= T::zero()) {
        return Err(Error::Domain("noise std must be nonnegative".into()));
    }
    let mut out = delta.clone();
    if sigma_client == T::zero() {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, Stream::Noise, &[]);
    for layer in out.layers_mut() {
        if !mask.includes(&layer.name) {
            continue;
        }
        for v in layer.values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = *v + sigma_client * T::of(z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conversion_examples() {
        assert_eq!(convert_noise(1.0, SigmaKind::Avg, SigmaKind::Client, 16.0), 4.0);
        assert_eq!(convert_noise(1.0, SigmaKind::Avg, SigmaKind::Sum, 16.0), 16.0);
        let avg = convert_noise(9.6e-7, SigmaKind::Client, SigmaKind::Avg, 1024.0);
        assert!((avg - 3.0e-8).abs() <= 1e-15 * 3.0e-8);
    }

    #[test]
    fn round_trips_fuzzed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let sigma = 10f64.powf(rng.random_range(-10.0..3.0));
            let l = rng.random_range(1..1_000_000) as f64;
            for from in SigmaKind::ALL {
                for to in SigmaKind::ALL {
                    let back = convert_noise(convert_noise(sigma, from, to, l), to, from, l);
                    assert!((back - sigma).abs() <= 1e-15 * sigma, "{from:?}->{to:?} {sigma} {l}");
                }
            }
        }
    }

    #[test]
    fn noise_multiplier_examples() {
        // q = L/N exactly
        let z = noise_multiplier(3e-8, 0.01, 1024.0 / 34753.0, 34753.0).unwrap();
        assert!((z - 0.003072).abs() < 1e-15);
        assert_eq!(noise_multiplier(0.0, 0.01, 0.0295, 34753.0).unwrap(), 0.0);
        assert!(matches!(noise_multiplier(1.0, 0.01, 0.0, 10.0), Err(Error::Domain(_))));
        assert!(matches!(noise_multiplier(1.0, 0.0, 0.1, 10.0), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_multiplier_exact_over_rationals() {
        let r = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        let sigma = r(3, 100_000_000);
        let q = r(204_800, 69_506_000);
        let z = noise_multiplier(sigma, r(1, 100), q, r(69_506_000, 1)).unwrap();
        assert_eq!(z, r(6144, 10_000));
    }

    fn big_tree(n: usize) -> ParamTree {
        ParamTree::new(vec![("a", vec![0.0; n / 2]), ("b", vec![0.0; n - n / 2])]).unwrap()
    }

    #[test]
    fn zero_sigma_and_empty_mask_are_identity() {
        let t = ParamTree::new(vec![("a", vec![1.0, -0.0]), ("b", vec![2.5])]).unwrap();
        assert_eq!(add_noise(&t, 0.0, &NoiseMask::All, 1).unwrap(), t);
        let empty = NoiseMask::layers(Vec::<String>::new());
        assert_eq!(add_noise(&t, 3.0, &empty, 1).unwrap(), t);
        assert!(!empty.covers(&t));
        assert!(NoiseMask::layers(["a", "b"]).covers(&t));
    }

    #[test]
    fn partial_mask_only_touches_included_layers() {
        let t = ParamTree::new(vec![("a", vec![0.0; 10]), ("b", vec![0.0; 10])]).unwrap();
        let out = add_noise(&t, 1.0, &NoiseMask::layers(["b"]), 5).unwrap();
        assert_eq!(out.get("a"), t.get("a"));
        assert!(out.get("b").unwrap().iter().all(|&v| v != 0.0));
        assert!(matches!(
            add_noise(&t, 1.0, &NoiseMask::layers(["zz"]), 5),
            Err(Error::Structure { layer, .. }) if layer == "zz"
        ));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let t = big_tree(100);
        assert_eq!(add_noise(&t, 0.5, &NoiseMask::All, 9).unwrap(), add_noise(&t, 0.5, &NoiseMask::All, 9).unwrap());
        assert_ne!(add_noise(&t, 0.5, &NoiseMask::All, 9).unwrap(), add_noise(&t, 0.5, &NoiseMask::All, 10).unwrap());
    }

    #[test]
    fn unit_noise_moments_over_a_million_coordinates() {
        let n = 1_000_000;
        let out = add_noise(&big_tree(n), 1.0, &NoiseMask::All, 2024).unwrap();
        let mean = out.iter_values().sum::<f64>() / n as f64;
        let var = out.iter_values().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn expected_squared_perturbation() {
        let t = big_tree(500);
        let sigma = 0.3;
        let draws = 100;
        let total: f64 = (0..draws)
            .map(|s| {
                let out = add_noise(&t, sigma, &NoiseMask::All, s).unwrap();
                out.sub(&t).unwrap().global_norm().powi(2)
            })
            .sum();
        let expected = sigma * sigma * 500.0;
        assert!((total / draws as f64 - expected).abs() < 0.02 * expected);
    }
}
