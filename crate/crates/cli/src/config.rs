//! Config files and flag merging. Every flag has a config-file twin; flags win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use seqgee::datagen::{ContinuousScenario, LogisticScenario};
use seqgee::harness::{ExperimentConfig, Method, ScenarioConfig};
use seqgee::pool_csv::PoolSchema;
use seqgee::{CorrKind, Dispersion, FitOptions, Link, ShrinkConfig, StoppingPolicy};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// `[run]` section; also the target of command-line flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scenario: Option<String>,
    pub method: Option<String>,
    pub d: Option<f64>,
    pub alpha: Option<f64>,
    pub structure: Option<String>,
    pub fit_structure: Option<String>,
    pub pk: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub n0: Option<usize>,
    pub pool_size: Option<usize>,
    pub conf_level: Option<f64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub standardize: Option<bool>,
    pub link: Option<String>,
    pub fixed_dispersion: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkSection {
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub theta: Option<f64>,
    pub epsilon: Option<f64>,
    pub rate_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSection {
    pub cluster: Option<String>,
    pub order: Option<String>,
    pub response: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub standardize: Option<bool>,
    pub intercept: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub shrinkage: ShrinkSection,
    #[serde(default)]
    pub schema: SchemaSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunSection {
    pub fn overlay(&mut self, flags: &RunSection) {
        overlay!(
            self, flags, scenario, method, d, alpha, structure, fit_structure, pk, reps, seed, n0, pool_size,
            conf_level, out, data, standardize, link, fixed_dispersion
        );
    }
}

impl ShrinkSection {
    pub fn overlay(&mut self, flags: &ShrinkSection) {
        overlay!(self, flags, gamma, delta, theta, epsilon, rate_alpha);
    }
}

pub fn parse_method(s: &str) -> Result<Method, ConfigError> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "oracle" => Ok(Method::Oracle),
        "ase-d" => Ok(Method::AseD),
        "ase-r" => Ok(Method::AseR),
        "gee" | "gee-full" => Ok(Method::GeeFull),
        other => bad(format!("unknown method '{other}' (expected oracle, ase-d, ase-r or gee)")),
    }
}

pub fn parse_structure(s: &str) -> Result<CorrKind, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "ind" | "independence" => Ok(CorrKind::Independence),
        "exch" | "exchangeable" => Ok(CorrKind::Exchangeable),
        "ar1" => Ok(CorrKind::Ar1),
        other => bad(format!("unknown structure '{other}' (expected ind, exch or ar1)")),
    }
}

fn parse_link(s: &str) -> Result<Link, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "identity" => Ok(Link::Identity),
        "logit" => Ok(Link::Logit),
        other => bad(format!("unknown link '{other}' (expected identity or logit)")),
    }
}

fn shrink_config(s: &ShrinkSection) -> Result<ShrinkConfig, ConfigError> {
    let mut c = ShrinkConfig::default();
    overlay_value(&mut c.gamma, s.gamma);
    overlay_value(&mut c.delta, s.delta);
    overlay_value(&mut c.theta, s.theta);
    overlay_value(&mut c.epsilon, s.epsilon);
    overlay_value(&mut c.rate_alpha, s.rate_alpha);
    c.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(c)
}

fn overlay_value(dst: &mut f64, src: Option<f64>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn fit_options(run: &RunSection) -> FitOptions {
    let mut fit = FitOptions::default();
    if let Some(phi) = run.fixed_dispersion {
        fit.dispersion = Dispersion::Fixed(phi);
    }
    fit
}

/// A fully resolved synthetic experiment plus its output directory.
pub fn simulate_config(run: &RunSection, shrink: &ShrinkSection) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
    let scenario_name = run.scenario.as_deref().unwrap_or("continuous");
    let method = parse_method(run.method.as_deref().unwrap_or("ase-d"))?;
    let pk = run.pk;
    let (scenario, default_n0, default_fit) = match scenario_name {
        "continuous" => {
            let structure = parse_structure(run.structure.as_deref().unwrap_or("ar1"))?;
            let alpha = run.alpha.unwrap_or(if structure == CorrKind::Independence { 0.0 } else { 0.5 });
            let p = ContinuousScenario::LEADING.len() + pk.unwrap_or(20);
            let mut s = ContinuousScenario::new(p, structure, alpha).map_err(|e| ConfigError(e.to_string()))?;
            overlay_pool(&mut s.pool_size, run.pool_size);
            (ScenarioConfig::Continuous(s), 25, structure)
        }
        "logistic" => {
            if let Some(st) = &run.structure {
                if parse_structure(st)? != CorrKind::Ar1 {
                    return bad("the logistic generator only supports ar1 response correlation");
                }
            }
            let p = LogisticScenario::LEADING.len() + pk.unwrap_or(12);
            let mut s = LogisticScenario::new(p, run.alpha.unwrap_or(0.3)).map_err(|e| ConfigError(e.to_string()))?;
            overlay_pool(&mut s.pool_size, run.pool_size);
            (ScenarioConfig::Logistic(s), 200, CorrKind::Ar1)
        }
        other => return bad(format!("unknown scenario '{other}' (expected continuous or logistic)")),
    };
    let fit_structure = match &run.fit_structure {
        Some(s) => parse_structure(s)?,
        None => default_fit,
    };
    let config = build(run, shrink, scenario, method, fit_structure, default_n0, None)?;
    Ok((config, run.out.clone().unwrap_or_else(|| PathBuf::from("out"))))
}

fn overlay_pool(dst: &mut usize, src: Option<usize>) {
    if let Some(n) = src {
        *dst = n;
    }
}

pub fn pool_config(
    run: &RunSection,
    shrink: &ShrinkSection,
    schema: &SchemaSection,
) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
    let Some(path) = run.data.clone() else {
        return bad("run-pool needs --data or run.data");
    };
    let need = |v: &Option<String>, name: &str| v.clone().ok_or_else(|| ConfigError(format!("schema is missing '{name}'")));
    let covariates = match &schema.covariates {
        Some(c) if !c.is_empty() => c.clone(),
        _ => return bad("schema is missing 'covariates'"),
    };
    let schema = PoolSchema {
        cluster_column: need(&schema.cluster, "cluster")?,
        order_column: need(&schema.order, "order")?,
        response_column: need(&schema.response, "response")?,
        covariate_columns: covariates,
        standardize: run.standardize.or(schema.standardize).unwrap_or(false),
        intercept: schema.intercept.unwrap_or(false),
    };
    let method = parse_method(run.method.as_deref().unwrap_or("ase-d"))?;
    let fit_structure = parse_structure(run.fit_structure.as_deref().or(run.structure.as_deref()).unwrap_or("ar1"))?;
    let link = parse_link(run.link.as_deref().unwrap_or("identity"))?;
    let config = build(run, shrink, ScenarioConfig::External { path, schema }, method, fit_structure, 25, Some(link))?;
    Ok((config, run.out.clone().unwrap_or_else(|| PathBuf::from("out"))))
}

fn build(
    run: &RunSection,
    shrink: &ShrinkSection,
    scenario: ScenarioConfig,
    method: Method,
    fit_structure: CorrKind,
    default_n0: usize,
    link: Option<Link>,
) -> Result<ExperimentConfig, ConfigError> {
    let Some(d) = run.d else {
        return bad("the precision target d is required (--d or run.d)");
    };
    let mut policy = StoppingPolicy::new(d, run.n0.unwrap_or(default_n0));
    if let Some(c) = run.conf_level {
        policy.conf_level = c;
    }
    policy.shrink = shrink_config(shrink)?;
    let config = ExperimentConfig {
        scenario,
        method,
        policy,
        fit_structure,
        fit: fit_options(run),
        link,
        replications: run.reps.unwrap_or(1),
        base_seed: run.seed.unwrap_or(1),
    };
    config.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str("[run]\nd = 0.3\nreps = 5\nmethod = \"ase-r\"\n[shrinkage]\nepsilon = 2.0\n").unwrap();
        let mut run = file.run.clone();
        run.overlay(&RunSection { d: Some(0.2), ..Default::default() });
        let (cfg, _) = simulate_config(&run, &file.shrinkage).unwrap();
        assert_eq!(cfg.policy.d, 0.2);
        assert_eq!(cfg.replications, 5);
        assert_eq!(cfg.method, Method::AseR);
        assert_eq!(cfg.policy.shrink.epsilon, 2.0);
    }

    #[test]
    fn defaults_follow_scenario() {
        let run = RunSection { d: Some(0.5), scenario: Some("logistic".into()), ..Default::default() };
        let (cfg, _) = simulate_config(&run, &ShrinkSection::default()).unwrap();
        assert_eq!(cfg.policy.n0, 200);
        match cfg.scenario {
            ScenarioConfig::Logistic(s) => assert_eq!(s.p, 15),
            _ => panic!("wrong scenario"),
        }
    }

    #[test]
    fn rejects_unknown_values() {
        let run = RunSection { d: Some(0.5), method: Some("best".into()), ..Default::default() };
        assert!(simulate_config(&run, &ShrinkSection::default()).is_err());
        assert!(toml::from_str::<FileConfig>("[run]\nbogus = 1\n").is_err());
        let run = RunSection { scenario: Some("continuous".into()), ..Default::default() };
        assert!(simulate_config(&run, &ShrinkSection::default()).is_err());
    }
}
