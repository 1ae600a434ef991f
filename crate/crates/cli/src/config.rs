//! TOML configuration. Every section is optional; omitted keys take the
//! values of the reference experiment. Unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;
use stabcode::lti::{example_plant, ClosedLoopSystem, Plant, TransferFunction};
use stabcode::mdc::{published, solve_assignment, IndexAssignment};
use stabcode::sim::{Coder, SimCode};
use stabcode::stability::{Construction, EmptyPolicy, TotalLossVariance};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    #[serde(rename = "code")]
    pub codes: Vec<CodeConfig>,
    pub assign: AssignConfig,
    pub design: DesignConfig,
    pub stability: StabilityConfig,
    pub simulate: SimulateConfig,
    pub tables: TablesConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            loop_: LoopConfig::default(),
            codes: default_codes(),
            assign: AssignConfig::default(),
            design: DesignConfig::default(),
            stability: StabilityConfig::default(),
            simulate: SimulateConfig::default(),
            tables: TablesConfig::default(),
        }
    }
}

/// Plant and filters. Without a `plant` table the reference plant and its
/// filters are used; a custom plant must bring its own filters.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub plant: Option<TransferFunction>,
    pub f: Option<TransferFunction>,
    pub lw: Option<TransferFunction>,
    pub ly: Option<TransferFunction>,
    /// Quantizer-input variance the scaling is calibrated to.
    pub sigma_v2: f64,
    pub sigma_d2: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig { plant: None, f: None, lw: None, ly: None, sigma_v2: 133.0, sigma_d2: 1.0 }
    }
}

impl LoopConfig {
    /// Uncalibrated loop (`β = 1`, unit quantizer noise).
    pub fn system(&self) -> Result<ClosedLoopSystem, CliError> {
        let reference = example_plant();
        let mut sys = match &self.plant {
            None => reference,
            Some(g) => {
                let (Some(f), Some(lw), Some(ly)) = (&self.f, &self.lw, &self.ly) else {
                    return Err(CliError::Config("a custom plant needs f, lw and ly".into()));
                };
                ClosedLoopSystem {
                    plant: Plant::output_disturbance(g.clone()),
                    f: f.clone(),
                    lw: lw.clone(),
                    ly: ly.clone(),
                    ..reference
                }
            }
        };
        if self.plant.is_none() {
            if let Some(f) = &self.f {
                sys.f = f.clone();
            }
            if let Some(lw) = &self.lw {
                sys.lw = lw.clone();
            }
            if let Some(ly) = &self.ly {
                sys.ly = ly.clone();
            }
        }
        sys.sigma_d2 = self.sigma_d2;
        Ok(sys)
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TableSource {
    /// The reference tables shipped with the library.
    #[default]
    Published,
    /// A fresh minimum-cost assignment.
    Solved,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CodeConfig {
    pub name: String,
    pub kind: Construction,
    pub k: usize,
    pub k_prime: usize,
    pub delta: f64,
    pub r: Option<u32>,
    #[serde(default)]
    pub table: TableSource,
}

impl CodeConfig {
    fn new(name: &str, kind: Construction, k: usize, k_prime: usize, delta: f64, r: Option<u32>) -> Self {
        CodeConfig { name: name.into(), kind, k, k_prime, delta, r, table: TableSource::Published }
    }

    pub fn sim_code(&self) -> Result<SimCode, CliError> {
        let bad = |m: String| CliError::Config(format!("code {}: {m}", self.name));
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(bad(format!("delta must be positive, got {}", self.delta)));
        }
        if self.k == 0 || self.k_prime == 0 || self.k_prime > self.k {
            return Err(bad(format!("need 1 ≤ k_prime ≤ k, got k={} k_prime={}", self.k, self.k_prime)));
        }
        match self.kind {
            Construction::Independent => Ok(SimCode::Independent { k: self.k, delta: self.delta }),
            Construction::Repetition => {
                if self.k_prime != 1 {
                    return Err(bad("repetition codes have k_prime = 1".into()));
                }
                Ok(SimCode::Repetition { k: self.k, delta: self.delta })
            }
            Construction::Md => {
                let r = self.r.ok_or_else(|| bad("md codes need r".into()))?;
                let assignment = assignment(r, self.k, self.table).map_err(|e| bad(e.to_string()))?;
                Ok(SimCode::Md { assignment, delta: self.delta })
            }
        }
    }
}

pub fn assignment(r: u32, k: usize, source: TableSource) -> Result<IndexAssignment, CliError> {
    match source {
        TableSource::Published => published(r, k)
            .ok_or_else(|| CliError::Config(format!("no published table for r={r}, k={k}; use table = \"solved\""))),
        TableSource::Solved => solve_assignment(r, k).map_err(|e| match e {
            stabcode::mdc::MdcError::Infeasible(_) => CliError::Infeasible(e.to_string()),
            other => CliError::Config(other.to_string()),
        }),
    }
}

/// The six reference codes, all near 7.1 bits/sample in total.
pub fn default_codes() -> Vec<CodeConfig> {
    let d32 = 2.0 * 12f64.sqrt() / 5.0;
    vec![
        CodeConfig::new("rep21", Construction::Repetition, 2, 1, 4.0, None),
        CodeConfig::new("ind21", Construction::Independent, 2, 1, 4.0, None),
        CodeConfig::new("md21", Construction::Md, 2, 1, 1.33, Some(3)),
        CodeConfig::new("rep31", Construction::Repetition, 3, 1, 12.0, None),
        CodeConfig::new("ind32", Construction::Independent, 3, 2, 12.0, None),
        CodeConfig::new("md32", Construction::Md, 3, 2, d32, Some(7)),
    ]
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub r: u32,
    pub k: usize,
    pub table: TableSource,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { r: 7, k: 3, table: TableSource::Solved }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub construction: Construction,
    pub k: usize,
    pub k_prime: usize,
    pub r: Option<u32>,
    /// Step to check; when absent the largest admissible step is proposed.
    pub delta: Option<f64>,
    /// Required relative headroom: `σ²(k′) ≤ (1 − margin) σ_v² / ‖S−1‖²`.
    pub margin: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            construction: Construction::Md,
            k: 3,
            k_prime: 2,
            r: Some(7),
            delta: None,
            margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub grid: Grid,
    pub total_loss: TotalLossVariance,
    pub decoder_on_empty: EmptyPolicy,
    /// Names from `[[code]]`; all codes when empty.
    pub codes: Vec<String>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            grid: Grid::new(0.0, 1.0, 0.01),
            total_loss: TotalLossVariance::InputVariance,
            decoder_on_empty: EmptyPolicy::Zero,
            codes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub grid: Grid,
    pub horizon: usize,
    pub warmup: usize,
    pub coder: Coder,
    pub decoder_on_empty: EmptyPolicy,
    pub empty_value: f64,
    pub total_loss: TotalLossVariance,
    pub codes: Vec<String>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            grid: Grid::new(0.0, 0.2, 0.02),
            horizon: 1_000_000,
            warmup: 1000,
            coder: Coder::HuffmanStream,
            decoder_on_empty: EmptyPolicy::Zero,
            empty_value: 0.0,
            total_loss: TotalLossVariance::InputVariance,
            codes: ["rep21", "ind21", "md21", "ind32", "md32"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TablesConfig {
    pub distortion_r: u32,
    pub distortion_k: usize,
    pub distortion_table: TableSource,
    pub distortion_deltas: Vec<f64>,
    pub distortion_samples: usize,
    pub efficiency_codes: Vec<String>,
    pub efficiency_horizon: usize,
}

impl Default for TablesConfig {
    fn default() -> Self {
        let base = 2.0 * 12f64.sqrt();
        TablesConfig {
            distortion_r: 7,
            distortion_k: 3,
            distortion_table: TableSource::Published,
            distortion_deltas: [1.0, 3.0, 5.0, 7.0, 9.0].iter().map(|n| base / n).collect(),
            distortion_samples: 1_000_000,
            efficiency_codes: Vec::new(),
            efficiency_horizon: 1_000_000,
        }
    }
}

/// Inclusive grid `start:stop:step`, or an explicit list in TOML.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid(pub Vec<f64>);

impl Grid {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Grid::parse(&format!("{start}:{stop}:{step}")).expect("valid literal grid")
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("grid must be start:stop:step with 0 ≤ start ≤ stop ≤ 1 and step > 0, got {s:?}"));
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let [start, stop, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0 && start >= 0.0 && stop >= start && stop <= 1.0) {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // Round to the step's precision so 0.1 prints as 0.1, not 0.30000000000000004.
        let round = |x: f64| (x * 1e12).round() / 1e12;
        Ok(Grid((0..=n).map(|i| round(start + i as f64 * step)).collect()))
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.0.is_empty() || self.0.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CliError::Config("grid points must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Spec(String),
            List(Vec<f64>),
        }
        match Raw::deserialize(d)? {
            Raw::Spec(s) => Grid::parse(&s).map_err(serde::de::Error::custom),
            Raw::List(v) => Ok(Grid(v)),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: Config = match path {
            None => Config::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.loop_.sigma_v2 > 0.0 && self.loop_.sigma_d2 > 0.0) {
            return Err(CliError::Config("sigma_v2 and sigma_d2 must be positive".into()));
        }
        self.loop_.system()?;
        let mut names = std::collections::BTreeSet::new();
        for c in &self.codes {
            if !names.insert(c.name.as_str()) {
                return Err(CliError::Config(format!("duplicate code name {}", c.name)));
            }
            c.sim_code()?;
        }
        for n in self
            .stability
            .codes
            .iter()
            .chain(&self.simulate.codes)
            .chain(&self.tables.efficiency_codes)
        {
            if !names.contains(n.as_str()) {
                return Err(CliError::Config(format!("unknown code {n}")));
            }
        }
        self.stability.grid.validate()?;
        self.simulate.grid.validate()?;
        if self.simulate.horizon == 0 || self.tables.efficiency_horizon == 0 || self.tables.distortion_samples == 0 {
            return Err(CliError::Config("horizons and sample counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.design.margin) {
            return Err(CliError::Config("design margin must lie in [0, 1)".into()));
        }
        if self.tables.distortion_deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(CliError::Config("distortion deltas must be positive".into()));
        }
        Ok(())
    }

    /// Codes named in `names`, or all codes when `names` is empty.
    pub fn select(&self, names: &[String]) -> Vec<&CodeConfig> {
        if names.is_empty() {
            self.codes.iter().collect()
        } else {
            names
                .iter()
                .filter_map(|n| self.codes.iter().find(|c| &c.name == n))
                .collect()
        }
    }
}
