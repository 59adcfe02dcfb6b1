//! Run configuration: a TOML file with five sections plus `--set` overrides.
//!
//! ```toml
//! seed = 1
//!
//! [data]
//! path = "data.csv"
//! out_dir = "iie-out"
//!
//! [estimator]
//! arms = [1, 0]
//! queries = [0.0, 2.0]
//! estimands = ["psi_m1", "psi_total", "prop_mediated"]
//! folds = 2
//! fold_mode = "swap-average"     # or "pooled"
//! nuisance_degree = 1            # polynomial degree of every logit / regression
//! projection = "linear"          # or "quadratic"
//! bandwidth = 0.4                # omit for leave-one-out CV
//! variance = "local"             # or "global"
//! ratio_mode = "separate"        # or "ratio"
//! positivity_floor = 0.001
//!
//! [sensitivity]
//! assumption = "A2"
//! taus = [0.0, 0.01, 0.02]
//!
//! [simulate]
//! n = 1000
//! reps = 500
//! points = [0.0, 2.0]
//! strategies = ["efficient", "plugin", "oracle"]
//! failure_cap = 0.01
//!
//! [simulate.convergence]
//! ns = [500, 1000, 2000, 4000, 8000, 16000]
//! reps = 200
//! panels = ["all-fast", "slow-pi", "slow-mu", "slow-mediator"]
//! pilot_n = 4000
//! grid = [-1.0, 3.0]
//! grid_points = 41
//!
//! [verify]
//! n_problems = 20
//! grid_sizes = [2, 3, 5]
//! floor = 0.05
//! perturbation = 0.2
//! seed = 20240601
//! ```

use crate::error::{CliError, CliResult};
use iie::estimators::{Bandwidth, ProjectionBasis, ProjectionSpec, RatioMode, SmootherSpec, VarianceMode};
use iie::nuisance::{BasisKind, BasisSpec, FoldMode, NuisanceConfig};
use iie::oracle_verify::BatteryConfig;
use iie::sensitivity::{AssumptionId, SensitivityAssumption};
use iie::simlab::{default_panels, ConvergenceConfig, Strategy, TableConfig};
use iie::ArmPair;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub estimator: EstimatorSection,
    pub sensitivity: SensitivitySection,
    pub simulate: SimulateSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            estimator: EstimatorSection::default(),
            sensitivity: SensitivitySection::default(),
            simulate: SimulateSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            out_dir: PathBuf::from("iie-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub arms: [u8; 2],
    pub queries: Vec<f64>,
    pub estimands: Vec<String>,
    pub folds: usize,
    pub fold_mode: FoldMode,
    pub nuisance_degree: usize,
    pub projection: ProjectionBasis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub variance: VarianceMode,
    pub ratio_mode: RatioMode,
    pub positivity_floor: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            arms: [1, 0],
            queries: vec![0.0, 2.0],
            estimands: ESTIMANDS.iter().map(|s| s.to_string()).collect(),
            folds: 2,
            fold_mode: FoldMode::SwapAverage,
            nuisance_degree: 1,
            projection: ProjectionBasis::Linear,
            bandwidth: None,
            variance: VarianceMode::Local,
            ratio_mode: RatioMode::Separate,
            positivity_floor: 1e-3,
        }
    }
}

pub const ESTIMANDS: [&str; 3] = ["psi_m1", "psi_total", "prop_mediated"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub assumption: String,
    pub taus: Vec<f64>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self {
            assumption: "A2".into(),
            taus: (0..=20).map(|k| k as f64 / 100.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub reps: usize,
    pub points: Vec<f64>,
    pub strategies: Vec<String>,
    pub failure_cap: f64,
    pub convergence: ConvergenceSection,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let t = TableConfig::default();
        Self {
            n: t.n,
            reps: t.reps,
            points: t.points,
            strategies: t.strategies.iter().map(|s| s.name().to_string()).collect(),
            failure_cap: t.failure_cap,
            convergence: ConvergenceSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub ns: Vec<usize>,
    pub reps: usize,
    pub panels: Vec<String>,
    pub pilot_n: usize,
    pub grid: [f64; 2],
    pub grid_points: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        let c = ConvergenceConfig::default();
        Self {
            ns: c.ns,
            reps: c.reps,
            panels: c.panels.into_iter().map(|p| p.name).collect(),
            pilot_n: c.pilot_n,
            grid: [c.grid.0, c.grid.1],
            grid_points: c.grid.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub n_problems: usize,
    pub grid_sizes: Vec<usize>,
    pub floor: f64,
    pub perturbation: f64,
    pub seed: u64,
    /// Adds 1e-3 to the named remainder term; exists to exercise exit code 5.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt_term: Option<String>,
}

impl Default for VerifySection {
    fn default() -> Self {
        let b = BatteryConfig::default();
        Self {
            n_problems: b.n_problems,
            grid_sizes: b.grid_sizes,
            floor: b.floor,
            perturbation: b.perturbation,
            seed: b.seed,
            corrupt_term: None,
        }
    }
}

/// Parse `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in '{key}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Load an optional file and apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override '{o}' is not key=value")))?;
            set_key(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn arms(&self) -> CliResult<ArmPair> {
        let [a, ap] = self.estimator.arms;
        ArmPair::new(a, ap).map_err(|e| CliError::Config(format!("estimator.arms: {e}")))
    }

    pub fn nuisance(&self) -> CliResult<NuisanceConfig> {
        let d = self.estimator.nuisance_degree;
        if d == 0 || d > 5 {
            return Err(CliError::Config(format!("estimator.nuisance_degree must be 1..=5, got {d}")));
        }
        let b = BasisSpec {
            kind: BasisKind::Polynomial { degree: d },
            ..BasisSpec::default()
        };
        Ok(NuisanceConfig {
            propensity: b,
            mediator: b,
            outcome: b,
        })
    }

    pub fn smoother(&self) -> CliResult<SmootherSpec> {
        let bandwidth = match self.estimator.bandwidth {
            None => Bandwidth::Loocv,
            Some(h) if h > 0.0 && h.is_finite() => Bandwidth::Fixed(h),
            Some(h) => return Err(CliError::Config(format!("estimator.bandwidth must be positive, got {h}"))),
        };
        Ok(SmootherSpec {
            bandwidth,
            variance: self.estimator.variance,
        })
    }

    pub fn projection(&self) -> ProjectionSpec {
        ProjectionSpec {
            basis: self.estimator.projection,
        }
    }

    pub fn assumption(&self, tau: f64) -> CliResult<SensitivityAssumption> {
        let id = AssumptionId::parse(&self.sensitivity.assumption)?;
        Ok(SensitivityAssumption::new(id, tau)?)
    }

    pub fn table(&self) -> CliResult<TableConfig> {
        let s = &self.simulate;
        let strategies = s.strategies.iter().map(|n| Strategy::parse(n)).collect::<Result<Vec<_>, _>>()?;
        let cfg = TableConfig {
            n: s.n,
            reps: s.reps,
            seed: self.seed,
            points: s.points.clone(),
            strategies,
            nuisance: self.nuisance()?,
            projection: self.projection(),
            smoother: self.smoother()?,
            folds: self.estimator.folds,
            fold_mode: self.estimator.fold_mode,
            failure_cap: s.failure_cap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn convergence(&self) -> CliResult<ConvergenceConfig> {
        let c = &self.simulate.convergence;
        let all = default_panels();
        let panels = c
            .panels
            .iter()
            .map(|name| {
                all.iter()
                    .find(|p| &p.name == name)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("unknown convergence panel '{name}'")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(ConvergenceConfig {
            panels,
            ns: c.ns.clone(),
            reps: c.reps,
            seed: self.seed,
            grid: (c.grid[0], c.grid[1], c.grid_points),
            pilot_n: c.pilot_n,
        })
    }

    pub fn battery(&self) -> BatteryConfig {
        let v = &self.verify;
        BatteryConfig {
            n_problems: v.n_problems,
            grid_sizes: v.grid_sizes.clone(),
            floor: v.floor,
            perturbation: v.perturbation,
            seed: v.seed,
            corrupt_term: v.corrupt_term.clone(),
        }
    }
}

/// Derive an independent seed for a named random stream from the root seed.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    let h = Sha256::digest(name.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    root ^ u64::from_le_bytes(b)
}
