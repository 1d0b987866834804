//! Replication driver and metric aggregation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::datagen::{continuous_pool, logistic_pool, ContinuousScenario, LogisticScenario};
use crate::error::{Error, Result};
use crate::model::{ClusterObservation, CorrKind, FitOptions, Link};
use crate::pool_csv::{load_csv_pool, ColumnScaling, PoolSchema};
use crate::sampling::{DataPool, SelectorKind};
use crate::sequential::{raw_efficiency_ratio, run_sequential, ModelConfig, StoppingPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// True support only, no shrinkage, random recruitment.
    Oracle,
    AseD,
    AseR,
    /// All covariates, no shrinkage, random recruitment.
    GeeFull,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Oracle => "Oracle",
            Method::AseD => "ASE-D",
            Method::AseR => "ASE-R",
            Method::GeeFull => "GEE",
        }
    }

    fn selector(self) -> SelectorKind {
        match self {
            Method::AseD => SelectorKind::DOptimal,
            _ => SelectorKind::Random,
        }
    }

    fn shrinks(self) -> bool {
        matches!(self, Method::AseD | Method::AseR)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Continuous(ContinuousScenario),
    Logistic(LogisticScenario),
    External { path: PathBuf, schema: PoolSchema },
}

impl ScenarioConfig {
    pub fn link(&self) -> Link {
        match self {
            ScenarioConfig::Continuous(_) => Link::Identity,
            ScenarioConfig::Logistic(_) => Link::Logit,
            // binary responses are detected when the pool is loaded
            ScenarioConfig::External { .. } => Link::Identity,
        }
    }

    pub fn beta0(&self) -> Option<DVector<f64>> {
        match self {
            ScenarioConfig::Continuous(s) => Some(s.beta0()),
            ScenarioConfig::Logistic(s) => Some(s.beta0()),
            ScenarioConfig::External { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub method: Method,
    pub policy: StoppingPolicy,
    pub fit_structure: CorrKind,
    pub fit: FitOptions,
    /// Link for external pools; synthetic scenarios fix their own.
    pub link: Option<Link>,
    pub replications: usize,
    pub base_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        if self.method == Method::Oracle && matches!(self.scenario, ScenarioConfig::External { .. }) {
            return Err(Error::InvalidParameter("the oracle method needs a known true support".into()));
        }
        self.policy.validate()
    }

    pub fn link(&self) -> Link {
        match self.scenario {
            ScenarioConfig::External { .. } => self.link.unwrap_or(Link::Identity),
            _ => self.scenario.link(),
        }
    }
}

/// JSON writes NaN as null; read it back as NaN.
fn nullable_f64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub index: usize,
    pub seed: u64,
    pub n_stop: usize,
    /// `None` when the true parameter is unknown or the run failed.
    pub covered: Option<bool>,
    /// `beta0` restricted to the selected coordinates lies in the ellipsoid.
    pub covered_selected: Option<bool>,
    #[serde(deserialize_with = "nullable_f64")]
    pub efficiency_ratio: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub raw_efficiency_ratio: f64,
    pub num_correct_zero: usize,
    pub num_incorrect_zero: usize,
    pub p0_hat: usize,
    #[serde(deserialize_with = "nullable_f64")]
    pub alpha_hat: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub max_semi_axis: f64,
    pub pool_exhausted: bool,
    pub clamp_events: usize,
    pub failed_fits: usize,
    /// Selected covariates in the full parameterization.
    pub selected: Vec<usize>,
    pub failure: Option<String>,
    /// Only written to `replications.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<f64>,
}

impl ReplicationMetrics {
    fn failed(index: usize, seed: u64, err: &Error) -> Self {
        Self {
            index,
            seed,
            n_stop: 0,
            covered: None,
            covered_selected: None,
            efficiency_ratio: f64::NAN,
            raw_efficiency_ratio: f64::NAN,
            num_correct_zero: 0,
            num_incorrect_zero: 0,
            p0_hat: 0,
            alpha_hat: f64::NAN,
            max_semi_axis: f64::NAN,
            pool_exhausted: false,
            clamp_events: 0,
            failed_fits: 0,
            selected: Vec::new(),
            failure: Some(err.to_string()),
            wall_time_ms: None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub index: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub replications: usize,
    pub succeeded: usize,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_n: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub sd_n: f64,
    /// `None` for external pools.
    pub coverage: Option<f64>,
    pub coverage_selected: Option<f64>,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_efficiency_ratio: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_num_correct_zero: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_num_incorrect_zero: f64,
    pub n_plus: usize,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_p0_hat: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub mean_alpha_hat: f64,
    pub clamp_events: usize,
    /// How often each covariate was selected at stopping.
    pub selection_counts: Vec<usize>,
    pub scaling: Vec<ColumnScaling>,
    pub failures: Vec<FailureRecord>,
    pub config: ExperimentConfig,
    pub per_replication: Vec<ReplicationMetrics>,
}

/// Pool shared by every replication of an external-data experiment.
#[derive(Debug, Clone)]
pub struct PreparedPool {
    clusters: Arc<Vec<ClusterObservation>>,
    scaling: Vec<ColumnScaling>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Option<PreparedPool>> {
    match &config.scenario {
        ScenarioConfig::External { path, schema } => {
            let loaded = load_csv_pool(path, schema)?;
            if loaded.clusters.len() < config.policy.n0 {
                return Err(Error::Data(format!(
                    "pool has {} clusters, fewer than the pilot size {}",
                    loaded.clusters.len(),
                    config.policy.n0
                )));
            }
            Ok(Some(PreparedPool { clusters: Arc::new(loaded.clusters), scaling: loaded.scaling }))
        }
        _ => Ok(None),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn replication_pool(config: &ExperimentConfig, prepared: Option<&PreparedPool>, seed: u64) -> Result<(Vec<ClusterObservation>, usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clusters, clamps) = match (&config.scenario, prepared) {
        (ScenarioConfig::Continuous(s), _) => {
            let g = continuous_pool(s, &mut rng)?;
            (g.clusters, g.clamp_events)
        }
        (ScenarioConfig::Logistic(s), _) => {
            let g = logistic_pool(s, &mut rng)?;
            (g.clusters, g.clamp_events)
        }
        (ScenarioConfig::External { .. }, Some(p)) => (p.clusters.as_ref().clone(), 0),
        (ScenarioConfig::External { .. }, None) => {
            return Err(Error::InvalidParameter("external pool was not prepared".into()))
        }
    };
    Ok((clusters, clamps, rng.next_u64()))
}

fn run_one(config: &ExperimentConfig, prepared: Option<&PreparedPool>, index: usize, seed: u64) -> Result<ReplicationMetrics> {
    let (mut clusters, clamp_events, pool_seed) = replication_pool(config, prepared, seed)?;
    let beta0 = config.scenario.beta0();
    let p = clusters.first().map_or(0, |c| c.p());
    let support: Vec<usize> = match &beta0 {
        Some(b) => (0..p).filter(|&j| b[j] != 0.0).collect(),
        None => (0..p).collect(),
    };
    if config.method == Method::Oracle {
        clusters = clusters.iter().map(|c| c.select_columns(&support)).collect();
    }
    let mut pool = DataPool::new(clusters, pool_seed)?;
    let model = ModelConfig { link: config.link(), kind: config.fit_structure, fit: config.fit };
    let mut policy = config.policy;
    policy.shrinkage_enabled = config.method.shrinks();
    let out = run_sequential(&mut pool, config.method.selector(), &model, &policy)?;

    // back to the full parameterization
    let to_full = |j: usize| if config.method == Method::Oracle { support[j] } else { j };
    let mut full_ind = vec![false; p];
    for (j, &k) in out.ase.indicators.iter().enumerate() {
        full_ind[to_full(j)] = k;
    }
    let selected: Vec<usize> = (0..p).filter(|&j| full_ind[j]).collect();

    let (mut num_c, mut num_ic) = (0, 0);
    let mut covered = None;
    let mut covered_selected = None;
    if let Some(b0) = &beta0 {
        for j in 0..p {
            if !full_ind[j] {
                if b0[j] == 0.0 {
                    num_c += 1;
                } else {
                    num_ic += 1;
                }
            }
        }
        if let Some(e) = &out.ellipsoid {
            let target = if config.method == Method::Oracle {
                DVector::from_iterator(support.len(), support.iter().map(|&j| b0[j]))
            } else {
                b0.clone()
            };
            covered = Some(e.contains(&target));
            let mut projected = DVector::zeros(target.len());
            for &j in &e.selected {
                projected[j] = target[j];
            }
            covered_selected = Some(e.contains(&projected));
        } else {
            covered = Some(false);
            covered_selected = Some(false);
        }
    }
    Ok(ReplicationMetrics {
        index,
        seed,
        n_stop: out.n_stop,
        covered,
        covered_selected,
        efficiency_ratio: out.efficiency_ratio,
        raw_efficiency_ratio: raw_efficiency_ratio(policy.d, out.n_stop, out.a_sq_at_stop, out.nu_at_stop),
        num_correct_zero: num_c,
        num_incorrect_zero: num_ic,
        p0_hat: out.ase.p0_hat,
        alpha_hat: out.fit.alpha_hat,
        max_semi_axis: out.ellipsoid.as_ref().map_or(f64::NAN, |e| e.max_semi_axis()),
        pool_exhausted: out.pool_exhausted,
        clamp_events,
        failed_fits: out.failed_fits,
        selected,
        failure: None,
        wall_time_ms: None,
    })
}

/// One replication with `seed = base_seed + index`. Failures come back as
/// metrics with `failure` set.
pub fn run_replication(config: &ExperimentConfig, prepared: Option<&PreparedPool>, index: usize) -> ReplicationMetrics {
    let seed = config.base_seed.wrapping_add(index as u64);
    let start = Instant::now();
    let mut m = match run_one(config, prepared, index, seed) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("replication {index} (seed {seed}) failed: {e}");
            ReplicationMetrics::failed(index, seed, &e)
        }
    };
    m.wall_time_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    m
}

pub fn aggregate(config: &ExperimentConfig, rows: Vec<ReplicationMetrics>, scaling: Vec<ColumnScaling>) -> Report {
    let ok: Vec<&ReplicationMetrics> = rows.iter().filter(|r| !r.is_failure()).collect();
    let k = ok.len();
    let mean_n = mean(ok.iter().map(|r| r.n_stop as f64));
    let sd_n = if k > 1 {
        (ok.iter().map(|r| (r.n_stop as f64 - mean_n).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else if k == 1 {
        0.0
    } else {
        f64::NAN
    };
    let known = config.scenario.beta0().is_some();
    let proportion = |flag: fn(&ReplicationMetrics) -> Option<bool>| {
        known.then(|| mean(ok.iter().map(|r| if flag(r) == Some(true) { 1.0 } else { 0.0 })))
    };
    let coverage = proportion(|r| r.covered);
    let coverage_selected = proportion(|r| r.covered_selected);
    let p = ok.iter().flat_map(|r| r.selected.iter().map(|&j| j + 1)).max().unwrap_or(0);
    let mut selection_counts = vec![0; p];
    for r in &ok {
        for &j in &r.selected {
            selection_counts[j] += 1;
        }
    }
    let failures = rows
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|m| FailureRecord { index: r.index, seed: r.seed, message: m.clone() }))
        .collect();
    Report {
        method: config.method,
        replications: rows.len(),
        succeeded: k,
        mean_n,
        sd_n,
        coverage,
        coverage_selected,
        mean_efficiency_ratio: mean(ok.iter().map(|r| r.efficiency_ratio)),
        mean_num_correct_zero: mean(ok.iter().map(|r| r.num_correct_zero as f64)),
        mean_num_incorrect_zero: mean(ok.iter().map(|r| r.num_incorrect_zero as f64)),
        n_plus: ok.iter().filter(|r| r.pool_exhausted).count(),
        mean_p0_hat: mean(ok.iter().map(|r| r.p0_hat as f64)),
        mean_alpha_hat: mean(ok.iter().map(|r| r.alpha_hat)),
        clamp_events: ok.iter().map(|r| r.clamp_events).sum(),
        selection_counts,
        scaling,
        failures,
        config: config.clone(),
        per_replication: rows,
    }
}

/// All replications, in parallel over seeds, aggregated in index order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let prepared = prepare(config)?;
    let rows: Vec<ReplicationMetrics> = (0..config.replications)
        .into_par_iter()
        .map(|i| run_replication(config, prepared.as_ref(), i))
        .collect();
    let scaling = prepared.map(|p| p.scaling).unwrap_or_default();
    Ok(aggregate(config, rows, scaling))
}

pub const CSV_HEADER: [&str; 14] = [
    "method", "replications", "succeeded", "N", "sd_N", "CP", "CP_selected", "kappa", "Num_c", "Num_ic", "N_plus", "p0_hat",
    "alpha_hat", "clamp_events",
];

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "NA".into()
    }
}

impl Report {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.method.label().to_string(),
            self.replications.to_string(),
            self.succeeded.to_string(),
            fmt_f(self.mean_n),
            fmt_f(self.sd_n),
            self.coverage.map_or("NA".into(), fmt_f),
            self.coverage_selected.map_or("NA".into(), fmt_f),
            fmt_f(self.mean_efficiency_ratio),
            fmt_f(self.mean_num_correct_zero),
            fmt_f(self.mean_num_incorrect_zero),
            self.n_plus.to_string(),
            fmt_f(self.mean_p0_hat),
            fmt_f(self.mean_alpha_hat),
            self.clamp_events.to_string(),
        ]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        out.write_record(self.csv_row())?;
        out.flush()?;
        Ok(())
    }

    /// JSON mirror without timing, so identical inputs give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        let mut copy = self.clone();
        for r in copy.per_replication.iter_mut() {
            r.wall_time_ms = None;
        }
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    /// `report.csv`, `report.json` and `replications.jsonl` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        let mut jl = std::io::BufWriter::new(std::fs::File::create(dir.join("replications.jsonl"))?);
        for r in &self.per_replication {
            writeln!(jl, "{}", serde_json::to_string(r)?)?;
        }
        jl.flush()?;
        Ok(())
    }
}
