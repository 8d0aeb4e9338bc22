//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.
//!
//! For noise multiplier `z` and sampling rate `q`, the per-step RDP at order
//! `α` is `ε(α) = ln A_α / (α − 1)` with
//!
//! ```text
//! A_α = E_{x∼N(0,z²)} [ ((1 − q) + q · exp((2x − 1) / (2z²)))^α ]
//! ```
//!
//! Integer orders use the finite binomial expansion; fractional orders use the
//! two-sided series with `erfc` tails. Everything is computed in log space.
//! Composition over `T` steps is linear in `ε(α)`, and the best `(ε, δ)` is
//! taken over the order grid.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::dp_mechanism::PrivacyParams;
use crate::error::{Error, Result};

/// `{1.1, …, 1.9} ∪ {2, …, 64} ∪ {128, 256}`.
pub fn default_orders() -> Vec<f64> {
    (1..10)
        .map(|i| 1.0 + i as f64 / 10.0)
        .chain((2..=64).map(f64::from))
        .chain([128.0, 256.0])
        .collect()
}

/// Per-order RDP of one mechanism invocation plus a composition count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps_per_step: Vec<f64>,
    pub steps: u64,
}

impl RdpCurve {
    /// Total RDP `T · ε(α)` per order.
    pub fn total(&self) -> Vec<f64> {
        self.eps_per_step
            .iter()
            .map(|&e| if self.steps == 0 { 0.0 } else { e * self.steps as f64 })
            .collect()
    }

    /// The same per-step curve composed `steps` times.
    pub fn compose(&self, steps: u64) -> RdpCurve {
        RdpCurve {
            steps,
            ..self.clone()
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(eᵃ − eᵇ)`, requires `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate far into the upper tail where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let inv = 1.0 / (2.0 * x2);
    // asymptotic series 1 − 1/(2x²) + 3/(4x⁴) − 15/(8x⁶) + 105/(16x⁸)
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv.powi(3) + 105.0 * inv.powi(4);
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln A_α` for integer `α` by the binomial expansion.
fn log_a_int(q: f64, z: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let inv_2z2 = 1.0 / (2.0 * z * z);
    (0..=alpha).fold(f64::NEG_INFINITY, |acc, i| {
        let fi = i as f64;
        let term = ln_binom_int(alpha, i) + fi * lq + (alpha - i) as f64 * l1q + (fi * fi - fi) * inv_2z2;
        log_add(acc, term)
    })
}

/// `ln A_α` for fractional `α` via the two-sided expansion around
/// `z₀ = z² ln(1/q − 1) + 1/2`.
fn log_a_frac(q: f64, z: f64, alpha: f64) -> f64 {
    const MAX_TERMS: usize = 100_000;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let z0 = z * z * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2z = std::f64::consts::SQRT_2 * z;
    let inv_2z2 = 1.0 / (2.0 * z * z);
    let ln_half = 0.5f64.ln();
    let (mut pos0, mut neg0, mut pos1, mut neg1) =
        (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    // generalized binomial coefficient binom(α, i), tracked as (ln|c|, sign)
    let (mut log_coef, mut positive) = (0.0f64, true);
    for i in 0..MAX_TERMS {
        let fi = i as f64;
        let j = alpha - fi;
        let t0 = log_coef + fi * lq + j * l1q;
        let t1 = log_coef + j * lq + fi * l1q;
        let e0 = ln_half + log_erfc((fi - z0) / sqrt2z);
        let e1 = ln_half + log_erfc((z0 - j) / sqrt2z);
        let s0 = t0 + (fi * fi - fi) * inv_2z2 + e0;
        let s1 = t1 + (j * j - j) * inv_2z2 + e1;
        if positive {
            pos0 = log_add(pos0, s0);
            pos1 = log_add(pos1, s1);
        } else {
            neg0 = log_add(neg0, s0);
            neg1 = log_add(neg1, s1);
        }
        if s0.max(s1) < -30.0 {
            break;
        }
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio == 0.0 {
            break;
        }
        log_coef += ratio.abs().ln();
        if ratio < 0.0 {
            positive = !positive;
        }
    }
    log_add(log_sub(pos0, neg0), log_sub(pos1, neg1))
}

fn rdp_at_order(z: f64, q: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * z * z);
    }
    if z.is_infinite() {
        return 0.0;
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= 1e6 {
        log_a_int(q, z, alpha as u64)
    } else {
        log_a_frac(q, z, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Per-step RDP curve of the sampled Gaussian mechanism (`steps = 1`).
pub fn rdp_sampled_gaussian(z: f64, q: f64, orders: &[f64]) -> Result<RdpCurve> {
    if !(z > 0.0) {
        return Err(Error::Domain(format!("noise multiplier must be positive, got {z}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if let Some(bad) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
        return Err(Error::Domain(format!("Rényi order must be finite and > 1, got {bad}")));
    }
    let eps = orders.iter().map(|&a| rdp_at_order(z, q, a)).collect::<Vec<_>>();
    if let Some(i) = eps.iter().position(|e| e.is_nan()) {
        return Err(Error::Numerical(format!(
            "RDP evaluation produced NaN at order {} (z={z}, q={q})",
            orders[i]
        )));
    }
    Ok(RdpCurve {
        orders: orders.to_vec(),
        eps_per_step: eps,
        steps: 1,
    })
}

/// How an RDP curve is turned into an `(ε, δ)` statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionRule {
    /// `ε = R(α) + ln(1/δ)/(α − 1)`.
    Classic,
    /// `ε = R(α) − (ln δ + ln α)/(α − 1) + ln((α − 1)/α)`, the rule used by
    /// opacus' RDP accountant; never larger than `Classic`.
    #[default]
    Tight,
}

impl ConversionRule {
    fn epsilon(self, rdp: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            ConversionRule::Classic => rdp + (1.0 / delta).ln() / (alpha - 1.0),
            ConversionRule::Tight => {
                rdp - (delta.ln() + alpha.ln()) / (alpha - 1.0) + ((alpha - 1.0) / alpha).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    #[serde(with = "crate::scalar::ext_float")]
    pub epsilon: f64,
    /// Minimizing order; `None` when nothing was spent or ε is infinite.
    pub best_order: Option<f64>,
}

/// Best `(ε, order)` over the curve's grid, using [`ConversionRule::Tight`].
pub fn epsilon_at_delta(curve: &RdpCurve, delta: f64) -> Result<PrivacySpent> {
    epsilon_at_delta_with(curve, delta, ConversionRule::default())
}

pub fn epsilon_at_delta_with(curve: &RdpCurve, delta: f64, rule: ConversionRule) -> Result<PrivacySpent> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if curve.orders.is_empty() {
        return Err(Error::config("orders", "empty Rényi order grid"));
    }
    if curve.steps == 0 {
        return Ok(PrivacySpent {
            epsilon: 0.0,
            best_order: None,
        });
    }
    let mut best = PrivacySpent {
        epsilon: f64::INFINITY,
        best_order: None,
    };
    for (&alpha, rdp) in curve.orders.iter().zip(curve.total()) {
        let eps = rule.epsilon(rdp, alpha, delta);
        if eps < best.epsilon {
            best = PrivacySpent {
                epsilon: eps,
                best_order: Some(alpha),
            };
        }
    }
    Ok(best)
}

/// `(ε, order)` after `steps` rounds; handles the degenerate cases: no noise
/// (`z = 0`) gives `ε = ∞`, no sampling or no steps gives `ε = 0`.
pub fn privacy_spent(z: f64, q: f64, steps: u64, delta: f64, orders: &[f64], rule: ConversionRule) -> Result<PrivacySpent> {
    if orders.is_empty() {
        return Err(Error::config("orders", "empty Rényi order grid"));
    }
    if steps == 0 || q == 0.0 {
        return Ok(PrivacySpent {
            epsilon: 0.0,
            best_order: None,
        });
    }
    if z == 0.0 {
        return Ok(PrivacySpent {
            epsilon: f64::INFINITY,
            best_order: None,
        });
    }
    let curve = rdp_sampled_gaussian(z, q, orders)?.compose(steps);
    epsilon_at_delta_with(&curve, delta, rule)
}

/// Search bracket for [`calibrate_noise`].
pub const CALIBRATION_BRACKET: (f64, f64) = (1e-3, 1e3);

/// Smallest-effort inverse of [`privacy_spent`]: finds `z` with
/// `|ε(z) − target| ≤ tolerance · target` by bisection in `ln z`.
pub fn calibrate_noise(
    target_eps: f64,
    q: f64,
    steps: u64,
    delta: f64,
    tolerance: f64,
    orders: &[f64],
    rule: ConversionRule,
) -> Result<f64> {
    if !(target_eps > 0.0) || !target_eps.is_finite() {
        return Err(Error::Domain(format!("target epsilon must be positive and finite, got {target_eps}")));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    let eps = |z: f64| privacy_spent(z, q, steps, delta, orders, rule).map(|p| p.epsilon);
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    if !(eps_lo >= target_eps && eps_hi <= target_eps) {
        return Err(Error::Unreachable {
            target: target_eps,
            z_lo: lo,
            z_hi: hi,
            eps_at_lo: eps_lo,
            eps_at_hi: eps_hi,
        });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        if (e - target_eps).abs() <= tolerance * target_eps {
            return Ok(mid);
        }
        // ε decreases in z
        if e > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "bisection did not reach tolerance {tolerance} for target {target_eps}"
    )))
}

/// Everything reported about a run's privacy, including the derivation chain
/// `σ → S → z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub sigma_client: f64,
    pub sigma_avg: f64,
    pub sigma_sum: f64,
    #[serde(with = "crate::scalar::ext_float")]
    pub clip: f64,
    pub q: f64,
    pub population: u64,
    pub cohort: f64,
    /// `S = C / (qN)`; absent when undefined.
    pub sensitivity: Option<f64>,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub delta: f64,
    #[serde(flatten)]
    pub spent: PrivacySpent,
    pub conversion: ConversionRule,
    pub sampling: String,
    /// False when noise was masked to a subset of layers; ε is then not a
    /// valid guarantee.
    pub dp_valid: bool,
}

impl PrivacyReport {
    pub fn from_params(p: &PrivacyParams, orders: &[f64], rule: ConversionRule, dp_valid: bool) -> Result<Self> {
        let sensitivity = p.sensitivity().ok();
        let noise_multiplier = if p.clip.is_infinite() {
            // unbounded sensitivity: no finite z describes the mechanism
            0.0
        } else if p.q == 0.0 || p.population == 0 {
            0.0
        } else {
            p.noise_multiplier()?
        };
        let spent = privacy_spent(noise_multiplier, p.q, p.steps, p.delta, orders, rule)?;
        Ok(Self {
            sigma_client: p.sigma_as(crate::dp_mechanism::SigmaKind::Client),
            sigma_avg: p.sigma_avg(),
            sigma_sum: p.sigma_as(crate::dp_mechanism::SigmaKind::Sum),
            clip: p.clip,
            q: p.q,
            population: p.population,
            cohort: p.cohort,
            sensitivity,
            noise_multiplier,
            steps: p.steps,
            delta: p.delta,
            spent,
            conversion: rule,
            sampling: "poisson with rate q (idealized; the simulator may fix the cohort size)".into(),
            dp_valid,
        })
    }
}
