//! Synthetic heterogeneous client populations.
//!
//! Inputs are class-conditional Gaussians around fixed class means. Each
//! client gets a size drawn from a configurable distribution and a private
//! label distribution drawn from `Dirichlet(α·1)`; small `α` means strong
//! label skew, `α = ∞` means every client sees the uniform label mix.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::rng::{stream_rng, Stream};
use crate::scalar::{ext_float, Real};

/// Distribution of examples per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExamplesPerClient {
    /// Exactly `k` examples each.
    Uniform { k: usize },
    /// `round(exp(mu + sigma·Z))`, at least one.
    LogNormal { mu: f64, sigma: f64 },
    /// Pareto tail: `floor(min · U^(−1/exponent))`, capped at `max`.
    Power { exponent: f64, min: usize, max: usize },
}

impl ExamplesPerClient {
    fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("population.examples_per_client.{f}"), r));
        match *self {
            ExamplesPerClient::Uniform { k: 0 } => bad("k", "must be positive"),
            ExamplesPerClient::LogNormal { sigma, mu } if !(sigma >= 0.0) || !mu.is_finite() => {
                bad("sigma", "must be nonnegative with finite mu")
            }
            ExamplesPerClient::Power { exponent, .. } if !(exponent > 0.0) => bad("exponent", "must be positive"),
            ExamplesPerClient::Power { min, max, .. } if min == 0 || max < min => {
                bad("min", "need 1 ≤ min ≤ max")
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            ExamplesPerClient::Uniform { k } => k,
            ExamplesPerClient::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                ((mu + sigma * z).exp().round() as usize).max(1)
            }
            ExamplesPerClient::Power { exponent, min, max } => {
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                let n = (min as f64 * u.powf(-1.0 / exponent)).floor();
                (n.min(max as f64) as usize).max(1)
            }
        }
    }
}

fn one_usize() -> usize {
    1
}

fn default_noise() -> f64 {
    1.0
}

fn default_probe() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub num_clients: usize,
    pub examples_per_client: ExamplesPerClient,
    /// Dirichlet concentration of per-client label distributions; `inf` = no skew.
    #[serde(with = "ext_float")]
    pub label_skew_alpha: f64,
    pub num_classes: usize,
    pub input_dim: usize,
    #[serde(default = "one_usize")]
    pub seq_len: usize,
    /// Within-class standard deviation around the class mean.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    /// Held-out examples, never assigned to a client.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("population.num_clients", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("population.num_classes", "must be positive"));
        }
        if self.input_dim == 0 || self.seq_len == 0 {
            return Err(Error::config("population.input_dim", "input_dim and seq_len must be positive"));
        }
        if !(self.label_skew_alpha > 0.0) {
            return Err(Error::config("population.label_skew_alpha", "must be positive (inf for none)"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::config("population.noise_level", "must be finite and nonnegative"));
        }
        self.examples_per_client.validate()
    }

    pub fn example_len(&self) -> usize {
        self.seq_len * self.input_dim
    }
}

/// One client's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ClientDataset<T = f64> {
    pub id: usize,
    pub data: Batch<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ClientPartition<T = f64> {
    /// Dense ids `0..N`, stored in id order.
    pub clients: Vec<ClientDataset<T>>,
    pub probe: Batch<T>,
    pub num_classes: usize,
}

impl<T: Real> ClientPartition<T> {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(|c| c.data.len()).sum()
    }

    /// Every client's data in one batch, in client-id order.
    pub fn pooled(&self) -> Batch<T> {
        let len = self.probe.example_len;
        let mut all = Batch::empty(len);
        for c in &self.clients {
            all.inputs.extend_from_slice(&c.data.inputs);
            all.labels.extend_from_slice(&c.data.labels);
        }
        all
    }

    /// Per-client label histograms normalized to distributions (empty clients skipped).
    pub fn label_distributions(&self) -> Vec<Vec<f64>> {
        self.clients
            .iter()
            .filter(|c| !c.data.is_empty())
            .map(|c| {
                let mut h = vec![0.0; self.num_classes];
                for &y in &c.data.labels {
                    h[y] += 1.0;
                }
                let n = c.data.len() as f64;
                h.into_iter().map(|v| v / n).collect()
            })
            .collect()
    }
}

fn dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    if alpha.is_infinite() {
        return vec![1.0 / k as f64; k];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed (tiny alpha): all mass on one class
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

fn class_means(spec: &PopulationSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, Stream::Population, &[u64::MAX]);
    (0..spec.num_classes)
        .map(|_| (0..spec.example_len()).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn draw_example<T: Real, R: Rng>(mean: &[f64], noise: f64, rng: &mut R, out: &mut Vec<T>) {
    for &m in mean {
        let z: f64 = StandardNormal.sample(rng);
        out.push(T::of(m + noise * z));
    }
}

/// Builds the population; a pure function of `spec`.
pub fn generate_population<T: Real>(spec: &PopulationSpec) -> Result<ClientPartition<T>> {
    spec.validate()?;
    let means = class_means(spec);
    let len = spec.example_len();
    let clients = (0..spec.num_clients)
        .map(|id| {
            let mut rng = stream_rng(spec.seed, Stream::Population, &[id as u64]);
            let n = spec.examples_per_client.sample(&mut rng);
            let p = dirichlet(spec.label_skew_alpha, spec.num_classes, &mut rng);
            let labels = WeightedIndex::new(&p).expect("a probability vector");
            let mut data = Batch::empty(len);
            data.inputs.reserve(n * len);
            for _ in 0..n {
                let y = labels.sample(&mut rng);
                draw_example(&means[y], spec.noise_level, &mut rng, &mut data.inputs);
                data.labels.push(y);
            }
            ClientDataset { id, data }
        })
        .collect();
    let mut rng = stream_rng(spec.seed, Stream::Population, &[u64::MAX - 1]);
    let mut probe = Batch::empty(len);
    for i in 0..spec.probe_size {
        let y = i % spec.num_classes;
        draw_example(&means[y], spec.noise_level, &mut rng, &mut probe.inputs);
        probe.labels.push(y);
    }
    Ok(ClientPartition {
        clients,
        probe,
        num_classes: spec.num_classes,
    })
}

/// Reassigns every example to a uniformly random client id, keeping the
/// client count. Clients may end up empty; they are kept.
pub fn iid_shuffle<T: Real>(p: &ClientPartition<T>, seed: u64) -> ClientPartition<T> {
    let n = p.num_clients();
    let len = p.probe.example_len;
    let mut rng = stream_rng(seed, Stream::Shuffle, &[]);
    let mut clients: Vec<ClientDataset<T>> = (0..n)
        .map(|id| ClientDataset {
            id,
            data: Batch::empty(len),
        })
        .collect();
    for c in &p.clients {
        for i in 0..c.data.len() {
            let dest = rng.random_range(0..n);
            clients[dest].data.push(c.data.example(i), c.data.labels[i]);
        }
    }
    ClientPartition {
        clients,
        probe: p.probe.clone(),
        num_classes: p.num_classes,
    }
}

/// Table 1-style statistics of examples per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_clients: usize,
    pub total_examples: usize,
    pub mean: f64,
    /// Population standard deviation (divides by the client count).
    pub std: f64,
    pub min: usize,
    pub max: usize,
    pub empty_clients: usize,
    pub class_histogram: Vec<usize>,
}

pub fn partition_stats<T: Real>(p: &ClientPartition<T>) -> Result<PartitionStats> {
    if p.clients.is_empty() {
        return Err(Error::Domain("statistics of an empty partition".into()));
    }
    let counts: Vec<usize> = p.clients.iter().map(|c| c.data.len()).collect();
    stats_from_counts(&counts, class_histogram(p))
}

fn class_histogram<T: Real>(p: &ClientPartition<T>) -> Vec<usize> {
    let mut h = vec![0; p.num_classes];
    for c in &p.clients {
        for &y in &c.data.labels {
            h[y] += 1;
        }
    }
    h
}

fn stats_from_counts(counts: &[usize], class_histogram: Vec<usize>) -> Result<PartitionStats> {
    let n = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let mean = total as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(PartitionStats {
        num_clients: counts.len(),
        total_examples: total,
        mean,
        std: var.sqrt(),
        min: *counts.iter().min().expect("nonempty"),
        max: *counts.iter().max().expect("nonempty"),
        empty_clients: counts.iter().filter(|&&c| c == 0).count(),
        class_histogram,
    })
}

impl PartitionStats {
    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} {:>12} | {:>10} {:>10} {:>8} {:>8}", "# clients", "# examples", "mean", "std", "min", "max");
        let _ = writeln!(s, "{}", "-".repeat(66));
        let _ = writeln!(
            s,
            "{:>10} {:>12} | {:>10.2} {:>10.2} {:>8} {:>8}",
            self.num_clients, self.total_examples, self.mean, self.std, self.min, self.max
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "examples per class: {:?}", self.class_histogram);
        if self.empty_clients > 0 {
            let _ = writeln!(s, "empty clients: {}", self.empty_clients);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(epc: ExamplesPerClient, alpha: f64) -> PopulationSpec {
        PopulationSpec {
            num_clients: 200,
            examples_per_client: epc,
            label_skew_alpha: alpha,
            num_classes: 5,
            input_dim: 3,
            seq_len: 1,
            noise_level: 0.5,
            probe_size: 50,
            seed: 17,
        }
    }

    fn mean_pairwise_tv(p: &ClientPartition) -> f64 {
        let d = p.label_distributions();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                total += 0.5 * d[i].iter().zip(&d[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    #[test]
    fn uniform_sizes_and_determinism() {
        let s = spec(ExamplesPerClient::Uniform { k: 7 }, 0.3);
        let a = generate_population::<f64>(&s).unwrap();
        assert!(a.clients.iter().all(|c| c.data.len() == 7));
        assert!(a.clients.iter().enumerate().all(|(i, c)| c.id == i));
        assert_eq!(a, generate_population::<f64>(&s).unwrap());
        assert_eq!(a.probe.len(), 50);
    }

    #[test]
    fn large_alpha_gives_near_uniform_labels() {
        let s = spec(ExamplesPerClient::Uniform { k: 400 }, 1e4);
        let p = generate_population::<f64>(&s).unwrap();
        // chi-square of each client's label counts against uniform; df = 4
        let mean_chi2: f64 = p
            .clients
            .iter()
            .map(|c| {
                let mut h = [0.0; 5];
                for &y in &c.data.labels {
                    h[y] += 1.0;
                }
                h.iter().map(|o| (o - 80.0f64).powi(2) / 80.0).sum::<f64>()
            })
            .sum::<f64>()
            / 200.0;
        assert!(mean_chi2 < 6.0, "mean chi2 {mean_chi2}");
        let skewed = generate_population::<f64>(&spec(ExamplesPerClient::Uniform { k: 400 }, 0.1)).unwrap();
        assert!(mean_pairwise_tv(&skewed) > 5.0 * mean_pairwise_tv(&p));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = spec(ExamplesPerClient::Uniform { k: 1 }, 1.0);
        s.num_classes = 0;
        assert!(matches!(generate_population::<f64>(&s), Err(Error::Config { .. })));
        let s = spec(ExamplesPerClient::Uniform { k: 0 }, 1.0);
        assert!(generate_population::<f64>(&s).is_err());
        let s = spec(ExamplesPerClient::Uniform { k: 3 }, 0.0);
        assert!(generate_population::<f64>(&s).is_err());
    }

    #[test]
    fn shuffle_conserves_examples_and_mixes_labels() {
        let s = spec(ExamplesPerClient::Uniform { k: 60 }, 0.1);
        let p = generate_population::<f64>(&s).unwrap();
        let q = iid_shuffle(&p, 3);
        assert_eq!(q.num_clients(), p.num_clients());
        assert_eq!(q.total_examples(), p.total_examples());
        let key = |b: &Batch| {
            let mut v: Vec<(Vec<u64>, usize)> = (0..b.len())
                .map(|i| (b.example(i).iter().map(|x| x.to_bits()).collect(), b.labels[i]))
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&p.pooled()), key(&q.pooled()));
        assert!(mean_pairwise_tv(&q) < mean_pairwise_tv(&p));
    }

    #[test]
    fn shuffle_single_client_is_identity() {
        let mut s = spec(ExamplesPerClient::Uniform { k: 9 }, 1.0);
        s.num_clients = 1;
        let p = generate_population::<f64>(&s).unwrap();
        assert_eq!(iid_shuffle(&p, 99), p);
    }

    #[test]
    fn stats_examples() {
        let st = stats_from_counts(&[1, 2, 3], vec![]).unwrap();
        assert_eq!((st.mean, st.min, st.max), (2.0, 1, 3));
        assert!((st.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(stats_from_counts(&[5], vec![]).unwrap().std, 0.0);
    }

    #[test]
    fn heavier_tails_have_larger_dispersion() {
        let uni = partition_stats(&generate_population::<f64>(&spec(ExamplesPerClient::Uniform { k: 10 }, 1.0)).unwrap()).unwrap();
        let ln = partition_stats(
            &generate_population::<f64>(&spec(ExamplesPerClient::LogNormal { mu: 2.0, sigma: 1.0 }, 1.0)).unwrap(),
        )
        .unwrap();
        assert!(ln.std / ln.mean > uni.std / uni.mean);
        assert!(ln.min >= 1);
    }

    #[test]
    fn power_law_reaches_large_max_to_mean_ratio() {
        let mut s = spec(
            ExamplesPerClient::Power {
                exponent: 1.05,
                min: 1,
                max: 100_000,
            },
            1.0,
        );
        s.num_clients = 5000;
        s.input_dim = 1;
        let st = partition_stats(&generate_population::<f64>(&s).unwrap()).unwrap();
        assert!(st.max as f64 / st.mean >= 100.0, "{st:?}");
        assert!(st.to_table().contains("mean"));
    }
}
