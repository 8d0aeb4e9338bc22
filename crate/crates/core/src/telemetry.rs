//! Run outputs: manifest, per-round JSONL metrics and their summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyReport;
use crate::config::{Precision, RunConfig};
use crate::data_synth::{generate_population, iid_shuffle};
use crate::error::{Error, Result};
use crate::fed_engine::{run_simulation_with, LayerStat, RoundMetrics, RunOptions, SimulationOutput};
use crate::param_tree::ParamTree;
use crate::rng::{GAUSSIAN_ALGORITHM, RNG_ALGORITHM};
use crate::scalar::Real;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine: String,
    pub version: String,
    pub seed: u64,
    pub precision: Precision,
    pub rng: String,
    pub gaussian_sampler: String,
    pub sigma_client: f64,
    pub sigma_avg: f64,
    pub sigma_sum: f64,
    pub sensitivity: Option<f64>,
    pub noise_multiplier: f64,
    pub dp_valid: bool,
    /// Resolved configuration with every default written out.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, privacy: &PrivacyReport) -> Self {
        Self {
            engine: "fldp".into(),
            version: ENGINE_VERSION.into(),
            seed: cfg.federation.seed,
            precision: cfg.run.precision,
            rng: RNG_ALGORITHM.into(),
            gaussian_sampler: GAUSSIAN_ALGORITHM.into(),
            sigma_client: privacy.sigma_client,
            sigma_avg: privacy.sigma_avg,
            sigma_sum: privacy.sigma_sum,
            sensitivity: privacy.sensitivity,
            noise_multiplier: privacy.noise_multiplier,
            dp_valid: privacy.dp_valid,
            config: cfg.resolved(),
        }
    }
}

/// Writes one metrics record as a single JSON line.
pub fn emit_round<W: Write>(m: &RoundMetrics, sink: &mut W) -> std::io::Result<()> {
    serde_json::to_writer(&mut *sink, m)?;
    sink.write_all(b"\n")
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("report types serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Paths written by [`simulate_to_dir`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub privacy_report: PathBuf,
    pub final_params: PathBuf,
    pub manifest: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.jsonl"),
            privacy_report: dir.join("privacy_report.json"),
            final_params: dir.join("final_params.json"),
            manifest: dir.join("run_manifest.json"),
        }
    }
}

/// Runs `cfg` in its configured precision and writes all outputs into `out`.
///
/// The manifest is written before round 0; each metrics line is flushed as
/// soon as its round finishes, so an aborted run leaves a valid prefix.
pub fn simulate_to_dir(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<(SimulationOutput<f64>, RunFiles)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cfg.run.precision {
        Precision::F64 => simulate_typed::<f64>(cfg, out, opts),
        Precision::F32 => simulate_typed::<f32>(cfg, out, opts),
    }
}

fn simulate_typed<T: Real>(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<(SimulationOutput<f64>, RunFiles)> {
    let files = RunFiles::in_dir(out);
    let mut pop = generate_population::<T>(&cfg.population)?;
    if cfg.run.iid_shuffle {
        pop = iid_shuffle(&pop, cfg.population.seed);
    }
    let mut fed = cfg.federation.cast::<T>();
    if let Some(path) = &cfg.run.seed_model {
        fed.seed_model = Some(ParamTree::<f64>::load(path)?.cast());
    }
    let privacy = PrivacyReport::from_params(
        &fed.privacy_params(pop.num_clients()),
        &crate::accountant::default_orders(),
        Default::default(),
        fed.noise_mask.covers(&crate::models::init_params::<f64>(&cfg.model, 0)),
    )?;
    write_json(&files.manifest, &RunManifest::new(cfg, &privacy))?;

    let file = File::create(&files.metrics).map_err(|e| Error::io(&files.metrics, e))?;
    let mut sink = BufWriter::new(file);
    let opts = RunOptions {
        check_invariants: opts.check_invariants || cfg.run.check_invariants,
        ..opts.clone()
    };
    let result = run_simulation_with(&fed, &pop, &cfg.model, &opts, |m| {
        emit_round(m, &mut sink)
            .and_then(|_| sink.flush())
            .map_err(|e| Error::io(&files.metrics, e))
    });
    sink.flush().map_err(|e| Error::io(&files.metrics, e))?;
    let run = result?;

    write_json(&files.privacy_report, &run.privacy)?;
    let final_params: ParamTree<f64> = run.final_params.cast();
    final_params.save(&files.final_params)?;
    let out = SimulationOutput {
        final_params,
        metrics: run.metrics,
        privacy: run.privacy,
        archive: run
            .archive
            .into_iter()
            .map(|a| crate::fed_engine::ArchivedRound {
                t: a.t,
                deltas: a.deltas.into_iter().map(|(id, d)| (id, d.cast())).collect(),
            })
            .collect(),
    };
    Ok((out, files))
}

/// Pooled statistics of one layer over every (round, client) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub mean: f64,
    pub std: f64,
    /// Client deltas pooled.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub rounds_skipped: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub best_loss: f64,
    pub best_round: u64,
    pub per_layer: BTreeMap<String, LayerSummary>,
}

/// Reads a metrics JSONL file; malformed lines are reported by line number.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: format!("{} line {}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Pools per-round layer statistics, weighting each round by its cohort size.
///
/// With `n_t` clients, mean `m_t` and population std `s_t` in round `t`, the
/// pooled mean is `Σ n_t m_t / Σ n_t` and the pooled variance is
/// `Σ n_t (s_t² + (m_t − m)²) / Σ n_t`.
pub fn summarize(metrics: &[RoundMetrics]) -> Result<Summary> {
    let last = metrics
        .last()
        .ok_or_else(|| Error::Domain("summary of an empty metrics file".into()))?;
    let (best_round, best_loss) = metrics
        .iter()
        .map(|m| (m.t, m.loss))
        .fold((last.t, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
    let mut per_layer = BTreeMap::new();
    for name in last.per_layer.keys() {
        let rows: Vec<(f64, LayerStat)> = metrics
            .iter()
            .filter(|m| m.cohort_size > 0)
            .map(|m| {
                let s = m.per_layer.get(name).ok_or_else(|| Error::Parse {
                    what: format!("metrics round {}", m.t),
                    reason: format!("layer `{name}` missing from per_layer"),
                })?;
                Ok((m.cohort_size as f64, *s))
            })
            .collect::<Result<_>>()?;
        let total: f64 = rows.iter().map(|r| r.0).sum();
        let (mean, std) = if total > 0.0 {
            let mean = rows.iter().map(|(n, s)| n * s.mean).sum::<f64>() / total;
            let var = rows
                .iter()
                .map(|(n, s)| n * (s.std * s.std + (s.mean - mean).powi(2)))
                .sum::<f64>()
                / total;
            (mean, var.sqrt())
        } else {
            (0.0, 0.0)
        };
        per_layer.insert(
            name.clone(),
            LayerSummary {
                mean,
                std,
                count: total as usize,
            },
        );
    }
    Ok(Summary {
        rounds: metrics.len(),
        rounds_skipped: metrics.iter().filter(|m| m.skipped).count(),
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        best_loss,
        best_round,
        per_layer,
    })
}

/// Writes `summary.csv` (one row per layer) and `summary.json` into `dir`.
pub fn write_summary(summary: &Summary, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("summary.csv");
    let json_path = dir.join("summary.json");
    let to_io = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&csv_path).map_err(to_io)?;
    w.write_record(["layer", "mean", "std", "count"]).map_err(to_io)?;
    for (name, s) in &summary.per_layer {
        w.write_record([name.clone(), s.mean.to_string(), s.std.to_string(), s.count.to_string()])
            .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&json_path, summary)?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn round(t: u64, n: usize, loss: f64, layers: &[(&str, f64, f64)]) -> RoundMetrics {
        RoundMetrics {
            t,
            cohort: (0..n).collect(),
            cohort_size: n,
            skipped: n == 0,
            loss,
            accuracy: 0.5,
            lr: 1.0,
            delta_norm_preclip_mean: 1.0,
            pseudograd_norm_prenoise: 1.0,
            pseudograd_norm_postnoise: 1.0,
            per_layer: layers
                .iter()
                .map(|&(k, mean, std)| (k.to_string(), LayerStat { mean, std }))
                .collect(),
        }
    }

    #[test]
    fn single_round_summary_is_that_round() {
        let s = summarize(&[round(0, 3, 0.7, &[("a", 2.0, 0.5)])]).unwrap();
        assert_eq!(s.per_layer["a"], LayerSummary { mean: 2.0, std: 0.5, count: 3 });
        assert_eq!((s.final_loss, s.best_loss, s.best_round), (0.7, 0.7, 0));
    }

    #[test]
    fn identical_rounds_with_zero_spread() {
        let r = round(0, 4, 1.0, &[("a", 2.0, 0.0)]);
        let mut r2 = r.clone();
        r2.t = 1;
        let s = summarize(&[r, r2]).unwrap();
        assert_eq!(s.per_layer["a"].std, 0.0);
        assert_eq!(s.per_layer["a"].count, 8);
    }

    #[test]
    fn pooled_stats_match_flat_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut all = Vec::new();
        let mut rounds = Vec::new();
        for t in 0..30 {
            let n = rng.random_range(0..6);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let (m, s) = if n == 0 {
                (0.0, 0.0)
            } else {
                let m = xs.iter().sum::<f64>() / n as f64;
                (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt())
            };
            all.extend(xs);
            rounds.push(round(t, n, rng.random(), &[("a", m, s)]));
        }
        let s = summarize(&rounds).unwrap();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!((s.per_layer["a"].mean - m).abs() <= 1e-12 * m);
        assert!((s.per_layer["a"].std - sd).abs() <= 1e-12 * sd);
        let best = rounds.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(s.best_loss, best);
    }

    #[test]
    fn emitted_lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rounds = vec![round(0, 2, 0.3, &[("w", 1.0, 0.1)]), round(1, 0, 0.2, &[("w", 0.0, 0.0)])];
        let mut f = File::create(&path).unwrap();
        for r in &rounds {
            emit_round(r, &mut f).unwrap();
        }
        assert_eq!(read_metrics(&path).unwrap(), rounds);
        let (csv, json) = write_summary(&summarize(&rounds).unwrap(), dir.path()).unwrap();
        assert!(std::fs::read_to_string(csv).unwrap().starts_with("layer,mean,std,count\nw,1,0.1,2"));
        assert!(json.exists());
    }

    #[test]
    fn malformed_line_reported_with_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut text = serde_json::to_string(&round(0, 1, 0.1, &[("w", 1.0, 0.0)])).unwrap();
        text.push_str("\n{not json\n");
        std::fs::write(&path, text).unwrap();
        match read_metrics(&path) {
            Err(Error::Parse { what, .. }) => assert!(what.ends_with("line 2"), "{what}"),
            other => panic!("{other:?}"),
        }
    }
}
