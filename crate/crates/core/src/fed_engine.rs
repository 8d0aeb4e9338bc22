//! The federated round loop with user-level DP.
//!
//! Each round samples a cohort, trains every sampled client locally from the
//! round-start parameters, clips and noises each client delta, averages the
//! deltas (unweighted) and hands the negated mean to the central optimizer as
//! a pseudo-gradient. With central SGD at lr 1 this moves the model by exactly
//! the mean delta.
//!
//! Clients within a round are independent and may run on a thread pool. Every
//! random draw comes from a stream keyed by `(seed, round, client)` and the
//! reduction runs in ascending client id, so results never depend on the
//! schedule.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{default_orders, ConversionRule, PrivacyReport};
use crate::clipping::{clip_global, ClipSpec};
use crate::data_synth::{ClientDataset, ClientPartition};
use crate::dp_mechanism::{add_noise, NoiseMask, PrivacyParams, SigmaKind};
use crate::error::{Error, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::optimizers::{Hyper, Optimizer, OptimizerKind, Schedule};
use crate::param_tree::ParamTree;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::{ext_float, Real};

/// How the clients of a round are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSpec {
    /// Exactly `size` distinct clients, uniformly without replacement.
    FixedSize { size: usize },
    /// Every client independently with probability `q`.
    Bernoulli { q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// `count` full shuffled passes over the client data.
    Epochs,
    /// `count` minibatches, reshuffling whenever the data runs out.
    Steps,
}

fn default_local_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSpec {
    pub mode: LocalMode,
    pub count: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Bound on each local minibatch gradient (`inf` disables).
    #[serde(default = "default_local_clip", with = "ext_float")]
    pub clip: f64,
}

fn default_delta() -> f64 {
    1e-9
}

fn default_sigma_kind() -> SigmaKind {
    SigmaKind::Avg
}

/// Noise level and target δ. `clip` and `population` restate values fixed
/// elsewhere; when given they must agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub sigma: f64,
    #[serde(default = "default_sigma_kind")]
    pub sigma_kind: SigmaKind,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_ext_float")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<u64>,
}

mod opt_ext_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct W(#[serde(with = "crate::scalar::ext_float")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(W).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralSpec {
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hyper: Hyper,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct FederationConfig<T: Real = f64> {
    /// Central steps `T`.
    pub rounds: u64,
    pub cohort: CohortSpec,
    pub local: LocalSpec,
    #[serde(default)]
    pub fedprox_mu: f64,
    pub clip: ClipSpec<T>,
    pub privacy: PrivacySection,
    pub central: CentralSpec,
    #[serde(default)]
    pub noise_mask: NoiseMask,
    #[serde(default)]
    pub seed: u64,
    /// Pre-trained starting point; random initialization when absent.
    #[serde(skip)]
    pub seed_model: Option<ParamTree<T>>,
}

impl<T: Real> FederationConfig<T> {
    /// Checks every field and the cross-field constraints against a population of `n` clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self.cohort {
            CohortSpec::FixedSize { size } if size == 0 || size > n => {
                return Err(Error::config(
                    "federation.cohort.size",
                    format!("need 1 ≤ size ≤ population ({n}), got {size}"),
                ))
            }
            CohortSpec::Bernoulli { q } if !(q > 0.0 && q <= 1.0) => {
                return Err(Error::config("federation.cohort.q", "need 0 < q ≤ 1"))
            }
            _ => {}
        }
        let l = &self.local;
        if l.count == 0 {
            return Err(Error::config("federation.local.count", "must be positive"));
        }
        if l.batch_size == 0 {
            return Err(Error::config("federation.local.batch_size", "must be positive"));
        }
        if !(l.lr >= 0.0 && l.lr.is_finite()) {
            return Err(Error::config("federation.local.lr", "must be finite and nonnegative"));
        }
        if !(l.clip > 0.0) {
            return Err(Error::config("federation.local.clip", "must be positive (inf disables)"));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return Err(Error::config("federation.fedprox_mu", "must be finite and nonnegative"));
        }
        self.clip.validate().map_err(|e| prefix(e, "federation."))?;
        let p = &self.privacy;
        if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
            return Err(Error::config("federation.privacy.sigma", "must be finite and nonnegative"));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(Error::config("federation.privacy.delta", "need 0 < delta < 1"));
        }
        if let Some(c) = p.clip {
            if c != self.clip.bound.to_f64_lossy() {
                return Err(Error::config(
                    "federation.privacy.clip",
                    format!("{c} differs from federation.clip.bound = {}", self.clip.bound),
                ));
            }
        }
        if let Some(pn) = p.population {
            if pn != n as u64 {
                return Err(Error::config(
                    "federation.privacy.population",
                    format!("{pn} differs from population.num_clients = {n}"),
                ));
            }
        }
        self.central.schedule.validate("federation.central.schedule")?;
        self.central.hyper.validate("federation.central.hyper")?;
        Ok(())
    }

    /// Sampling rate used by the accountant; `L/N` for fixed-size cohorts.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        match self.cohort {
            CohortSpec::FixedSize { size } => size as f64 / n as f64,
            CohortSpec::Bernoulli { q } => q,
        }
    }

    /// Cohort size `L` used to convert between noise parametrizations.
    pub fn expected_cohort(&self, n: usize) -> f64 {
        match self.cohort {
            CohortSpec::FixedSize { size } => size as f64,
            CohortSpec::Bernoulli { q } => q * n as f64,
        }
    }

    pub fn privacy_params(&self, n: usize) -> PrivacyParams {
        PrivacyParams {
            clip: self.clip.bound.to_f64_lossy(),
            sigma: self.privacy.sigma,
            sigma_kind: self.privacy.sigma_kind,
            q: self.sampling_rate(n),
            population: n as u64,
            cohort: self.expected_cohort(n),
            steps: self.rounds,
            delta: self.privacy.delta,
        }
    }
}

impl<T: Real> FederationConfig<T> {
    /// Same configuration over another scalar type.
    pub fn cast<U: Real>(&self) -> FederationConfig<U> {
        let conv = |v: T| U::of(v.to_f64_lossy());
        FederationConfig {
            rounds: self.rounds,
            cohort: self.cohort.clone(),
            local: self.local.clone(),
            fedprox_mu: self.fedprox_mu,
            clip: ClipSpec {
                bound: conv(self.clip.bound),
                variant: self.clip.variant,
                weights: self
                    .clip
                    .weights
                    .as_ref()
                    .map(|w| w.iter().map(|(k, &v)| (k.clone(), conv(v))).collect()),
            },
            privacy: self.privacy.clone(),
            central: self.central.clone(),
            noise_mask: self.noise_mask.clone(),
            seed: self.seed,
            seed_model: self.seed_model.as_ref().map(ParamTree::cast),
        }
    }
}

fn prefix(e: Error, p: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{p}{field}"),
            reason,
        },
        other => other,
    }
}

/// Execution knobs that never change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client training; 0 picks the rayon default, 1 runs inline.
    pub threads: usize,
    /// Keep every pre-clip client delta (memory heavy; for telemetry checks).
    pub archive_deltas: bool,
    /// Verify each round that every aggregated delta has norm ≤ C.
    pub check_invariants: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub mean: f64,
    pub std: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: u64,
    pub cohort: Vec<usize>,
    /// Clients whose deltas were aggregated (empty clients excluded).
    pub cohort_size: usize,
    pub skipped: bool,
    /// Probe loss and accuracy after this round's update.
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub delta_norm_preclip_mean: f64,
    pub pseudograd_norm_prenoise: f64,
    pub pseudograd_norm_postnoise: f64,
    /// Mean and population std over the cohort of each layer's pre-clip delta norm.
    pub per_layer: BTreeMap<String, LayerStat>,
}

/// Pre-clip deltas of one round, in client-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedRound<T: Real = f64> {
    pub t: u64,
    pub deltas: Vec<(usize, ParamTree<T>)>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput<T: Real = f64> {
    pub final_params: ParamTree<T>,
    pub metrics: Vec<RoundMetrics>,
    pub privacy: PrivacyReport,
    pub archive: Vec<ArchivedRound<T>>,
}

/// Client ids for `round`, sorted ascending; deterministic in `(seed, round)`.
pub fn sample_cohort(n: usize, cohort: &CohortSpec, round: u64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = stream_rng(seed, Stream::Cohort, &[round]);
    let mut ids = match *cohort {
        CohortSpec::FixedSize { size } => {
            if size == 0 || size > n {
                return Err(Error::config(
                    "federation.cohort.size",
                    format!("need 1 ≤ size ≤ population ({n}), got {size}"),
                ));
            }
            index::sample(&mut rng, n, size).into_vec()
        }
        CohortSpec::Bernoulli { q } => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::config("federation.cohort.q", "need 0 < q ≤ 1"));
            }
            (0..n).filter(|_| rng.random_bool(q)).collect()
        }
    };
    ids.sort_unstable();
    Ok(ids)
}

/// Minibatch index lists for one client's local run.
fn minibatches<R: Rng>(n: usize, spec: &LocalSpec, rng: &mut R) -> Vec<Vec<usize>> {
    let bs = spec.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    match spec.mode {
        LocalMode::Epochs => {
            for _ in 0..spec.count {
                order.shuffle(rng);
                out.extend(order.chunks(bs).map(<[usize]>::to_vec));
            }
        }
        LocalMode::Steps => {
            let mut pos = n;
            for _ in 0..spec.count {
                if pos + bs > n {
                    order.shuffle(rng);
                    pos = 0;
                }
                out.push(order[pos..pos + bs].to_vec());
                pos += bs;
            }
        }
    }
    out
}

/// Local SGD on one client; returns the final-minus-initial parameters.
///
/// Each minibatch gradient (of the loss plus the proximal term, when `μ > 0`)
/// is clipped to the local bound before the step.
pub fn local_train<T: Real>(
    global: &ParamTree<T>,
    client: &ClientDataset<T>,
    cfg: &FederationConfig<T>,
    model: &ModelSpec,
    round: u64,
) -> Result<ParamTree<T>> {
    if client.data.is_empty() {
        return Err(Error::Domain(format!("client {} has no data", client.id)));
    }
    let mut rng = stream_rng(cfg.seed, Stream::LocalTraining, &[round, client.id as u64]);
    let lr = T::of(cfg.local.lr);
    let mu = T::of(cfg.fedprox_mu);
    let local_clip = T::of(cfg.local.clip);
    let mut theta = global.clone();
    for idx in minibatches(client.data.len(), &cfg.local, &mut rng) {
        let batch: Batch<T> = if idx.len() == client.data.len() && idx.iter().enumerate().all(|(i, &j)| i == j) {
            client.data.clone()
        } else {
            client.data.select(&idx)
        };
        let mut g = models::grad(model, &theta, &batch)?;
        if cfg.fedprox_mu > 0.0 {
            let drift = theta.sub(global)?;
            g.axpy_assign(mu, &drift)?;
        }
        let g = clip_global(&g, local_clip);
        theta.axpy_assign(-lr, &g)?;
    }
    theta.sub(global)
}

/// Clip then noise one client delta.
pub fn dp_process<T: Real>(
    delta: &ParamTree<T>,
    clip: &ClipSpec<T>,
    sigma_client: T,
    mask: &NoiseMask,
    seed: u64,
) -> Result<ParamTree<T>> {
    let clipped = clip.apply(delta)?;
    add_noise(&clipped, sigma_client, mask, seed)
}

/// Unweighted mean, reduced in ascending client id whatever the input order.
pub fn aggregate<T: Real>(deltas: &[(usize, ParamTree<T>)]) -> Result<ParamTree<T>> {
    if deltas.is_empty() {
        return Err(Error::Domain("aggregate of an empty cohort".into()));
    }
    let mut order: Vec<&(usize, ParamTree<T>)> = deltas.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    let trees: Vec<ParamTree<T>> = order.into_iter().map(|(_, t)| t.clone()).collect();
    ParamTree::mean(&trees)
}

fn mean_std(xs: &[f64]) -> LayerStat {
    if xs.is_empty() {
        return LayerStat { mean: 0.0, std: 0.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    LayerStat { mean, std: var.sqrt() }
}

struct ClientResult<T: Real> {
    id: usize,
    preclip: ParamTree<T>,
    clipped: ParamTree<T>,
    noised: ParamTree<T>,
}

fn run_client<T: Real>(
    id: usize,
    global: &ParamTree<T>,
    pop: &ClientPartition<T>,
    cfg: &FederationConfig<T>,
    model: &ModelSpec,
    round: u64,
    sigma_client: T,
) -> Result<Option<ClientResult<T>>> {
    let client = &pop.clients[id];
    if client.data.is_empty() {
        log::warn!("round {round}: client {id} has no data, dropped from the cohort");
        return Ok(None);
    }
    let preclip = local_train(global, client, cfg, model, round)?;
    let clipped = cfg.clip.apply(&preclip)?;
    let noise_seed = derive_seed(cfg.seed, Stream::Noise, &[round, id as u64]);
    let noised = add_noise(&clipped, sigma_client, &cfg.noise_mask, noise_seed)?;
    Ok(Some(ClientResult {
        id,
        preclip,
        clipped,
        noised,
    }))
}

/// Runs `cfg.rounds` rounds of DP federated training on `pop`.
///
/// `on_round` sees each round's metrics as soon as they exist; an error from
/// it aborts the run.
pub fn run_simulation_with<T: Real>(
    cfg: &FederationConfig<T>,
    pop: &ClientPartition<T>,
    model: &ModelSpec,
    opts: &RunOptions,
    mut on_round: impl FnMut(&RoundMetrics) -> Result<()>,
) -> Result<SimulationOutput<T>> {
    let n = pop.num_clients();
    cfg.validate(n)?;
    model.validate()?;
    if pop.probe.example_len != model.example_len() {
        return Err(Error::config(
            "model.input_dim",
            format!(
                "model expects {} scalars per example, population provides {}",
                model.example_len(),
                pop.probe.example_len
            ),
        ));
    }
    if pop.num_classes > model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("population has {} classes, model only {}", pop.num_classes, model.num_classes),
        ));
    }
    let mut params = match &cfg.seed_model {
        Some(p) => {
            let init: ParamTree<T> = models::init_params(model, 0);
            init.check_congruent(p)?;
            p.clone()
        }
        None => models::init_params(model, derive_seed(cfg.seed, Stream::ModelInit, &[])),
    };
    cfg.noise_mask.check(&params)?;
    let dp_valid = cfg.noise_mask.covers(&params);
    let privacy_params = cfg.privacy_params(n);
    let privacy = PrivacyReport::from_params(&privacy_params, &default_orders(), ConversionRule::default(), dp_valid)?;
    let sigma_client = T::of(privacy_params.sigma_client());
    let clip_bound = cfg.clip.bound;
    let mut central: Optimizer<T> = Optimizer::new(cfg.central.optimizer, cfg.central.hyper.clone());
    let pool = match opts.threads {
        1 => None,
        k => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?,
        ),
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let mut archive = Vec::new();

    for t in 0..cfg.rounds {
        let cohort = sample_cohort(n, &cfg.cohort, t, cfg.seed)?;
        let global = &params;
        let work = |id: &usize| run_client(*id, global, pop, cfg, model, t, sigma_client);
        let results: Vec<Result<Option<ClientResult<T>>>> = match &pool {
            None => cohort.iter().map(work).collect(),
            Some(pool) => pool.install(|| cohort.par_iter().map(work).collect()),
        };
        let mut done = Vec::with_capacity(results.len());
        for r in results {
            if let Some(c) = r? {
                done.push(c);
            }
        }
        let lr = cfg.central.schedule.lr_at(t);
        let mut m = RoundMetrics {
            t,
            cohort: cohort.clone(),
            cohort_size: done.len(),
            skipped: done.is_empty(),
            loss: 0.0,
            accuracy: 0.0,
            lr,
            delta_norm_preclip_mean: 0.0,
            pseudograd_norm_prenoise: 0.0,
            pseudograd_norm_postnoise: 0.0,
            per_layer: names
                .iter()
                .map(|n| (n.clone(), LayerStat { mean: 0.0, std: 0.0 }))
                .collect(),
        };
        if done.is_empty() {
            log::warn!("round {t}: empty cohort, round skipped (privacy budget still charged)");
        } else {
            if opts.check_invariants {
                let slack = T::one() + T::of(1e-12);
                if let Some(c) = done.iter().find(|c| !(c.clipped.global_norm() <= clip_bound * slack)) {
                    return Err(Error::Numerical(format!(
                        "round {t}: clipped delta of client {} has norm {} > {}",
                        c.id,
                        c.clipped.global_norm(),
                        clip_bound
                    )));
                }
            }
            let norms: Vec<f64> = done.iter().map(|c| c.preclip.global_norm().to_f64_lossy()).collect();
            m.delta_norm_preclip_mean = norms.iter().sum::<f64>() / norms.len() as f64;
            for (k, name) in names.iter().enumerate() {
                let per: Vec<f64> = done.iter().map(|c| c.preclip.layers()[k].norm().to_f64_lossy()).collect();
                m.per_layer.insert(name.clone(), mean_std(&per));
            }
            let clipped: Vec<(usize, ParamTree<T>)> = done.iter().map(|c| (c.id, c.clipped.clone())).collect();
            let noised: Vec<(usize, ParamTree<T>)> = done.iter().map(|c| (c.id, c.noised.clone())).collect();
            let pre = aggregate(&clipped)?;
            let post = aggregate(&noised)?;
            m.pseudograd_norm_prenoise = pre.global_norm().to_f64_lossy();
            m.pseudograd_norm_postnoise = post.global_norm().to_f64_lossy();
            params = central.apply(&params, &post.scale(-T::one()), T::of(lr))?;
            if opts.archive_deltas {
                archive.push(ArchivedRound {
                    t,
                    deltas: done.into_iter().map(|c| (c.id, c.preclip)).collect(),
                });
            }
        }
        let (loss, acc) = models::evaluate(model, &params, &pop.probe)?;
        m.loss = loss.to_f64_lossy();
        m.accuracy = acc.to_f64_lossy();
        if !m.loss.is_finite() || !params.all_finite() {
            return Err(Error::Numerical(format!("round {t}: non-finite probe loss or parameters")));
        }
        on_round(&m)?;
        metrics.push(m);
    }
    Ok(SimulationOutput {
        final_params: params,
        metrics,
        privacy,
        archive,
    })
}

pub fn run_simulation<T: Real>(
    cfg: &FederationConfig<T>,
    pop: &ClientPartition<T>,
    model: &ModelSpec,
    opts: &RunOptions,
) -> Result<SimulationOutput<T>> {
    run_simulation_with(cfg, pop, model, opts, |_| Ok(()))
}
