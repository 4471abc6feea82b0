//! Experiment files: named processes and kernels, a plan or a pasting, and run
//! parameters.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::concat::{ConcatenationPlan, Stage, Truncation};
use crate::error::{Error, Result};
use crate::estimate::{Continuation, GSpec, McConfig, Stopping};
use crate::functions::FunctionSpec;
use crate::pasting::{make_alternating_plan, PastingSpec};
use crate::process::ProcessSpec;
use crate::state_space::{StateSpaceDesc, Value};
use crate::transfer::KernelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory: runs never fall back to a clock-derived seed.
    pub seed: u64,
    #[serde(default)]
    pub processes: BTreeMap<String, ProcessSpec>,
    #[serde(default)]
    pub kernels: BTreeMap<String, KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pasting: Option<PastingSection>,
    #[serde(default)]
    pub params: Params,
    /// Starting points; defaults to every label of the first stage.
    #[serde(default)]
    pub starts: Vec<Start>,
    /// Test functions; defaults to `f ≡ 1`.
    #[serde(default)]
    pub functions: Vec<FunctionSpec>,
    #[serde(default)]
    pub dynkin: DynkinSection,
    #[serde(default)]
    pub revival: RevivalSection,
    #[serde(default)]
    pub projection: ProjectionSection,
    #[serde(default)]
    pub laplace: LaplaceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub time: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_revivals")]
    pub max_revivals: usize,
    /// Absent means no time horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_sigma")]
    pub tolerance_sigma: f64,
    #[serde(default = "default_cap")]
    pub censor_cap: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            alpha: 1.0,
            time: 1.0,
            samples: default_samples(),
            max_revivals: default_revivals(),
            horizon: None,
            tolerance_sigma: default_sigma(),
            censor_cap: default_cap(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_samples() -> usize {
    10_000
}
fn default_revivals() -> usize {
    1_000
}
fn default_sigma() -> f64 {
    3.0
}
fn default_cap() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Start {
    #[serde(default = "first_stage")]
    pub stage: usize,
    pub point: Value,
}

fn first_stage() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub stages: Vec<StageEntry>,
}

/// Stage `i` (1-based) runs the named process under tag `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub process: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    #[default]
    Oracle,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PastingSection {
    pub minus: String,
    pub plus: String,
    pub kernel_minus: String,
    pub kernel_plus: String,
    #[serde(default)]
    pub engine: EngineKind,
    /// Shared points to test; defaults to every shared label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g_minus: Vec<FunctionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g_plus: Vec<FunctionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynkinSection {
    #[serde(default = "first_revival")]
    pub stopping: Stopping,
    #[serde(default = "oracle")]
    pub continuation: Continuation,
}

fn first_revival() -> Stopping {
    Stopping::Revival { n: 1 }
}
fn oracle() -> Continuation {
    Continuation::Oracle
}

impl Default for DynkinSection {
    fn default() -> Self {
        DynkinSection {
            stopping: first_revival(),
            continuation: oracle(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevivalSection {
    #[serde(default = "first_stage")]
    pub n: usize,
    /// Pre-revival functionals; defaults to `g ≡ 1`.
    #[serde(default)]
    pub g: Vec<GSpec>,
}

impl Default for RevivalSection {
    fn default() -> Self {
        RevivalSection { n: 1, g: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    /// Odd and even copy compared at each point.
    #[serde(default = "default_copies")]
    pub copies: [usize; 2],
}

fn default_copies() -> [usize; 2] {
    [1, 2]
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection { copies: default_copies() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceSection {
    #[serde(default = "default_orders")]
    pub k: Vec<usize>,
    /// Largest accepted relative error against the exact semigroup.
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
}

fn default_orders() -> Vec<usize> {
    vec![64]
}
fn default_rel_tol() -> f64 {
    0.02
}

impl Default for LaplaceSection {
    fn default() -> Self {
        LaplaceSection {
            k: default_orders(),
            rel_tol: default_rel_tol(),
        }
    }
}

/// Command-line values that replace the file's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub alpha: Option<f64>,
    pub time: Option<f64>,
    pub max_revivals: Option<usize>,
    pub horizon: Option<f64>,
    pub tolerance_sigma: Option<f64>,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        let p = &mut self.params;
        if let Some(v) = o.seed {
            self.seed = v;
        }
        p.samples = o.samples.unwrap_or(p.samples);
        p.alpha = o.alpha.unwrap_or(p.alpha);
        p.time = o.time.unwrap_or(p.time);
        p.max_revivals = o.max_revivals.unwrap_or(p.max_revivals);
        p.horizon = o.horizon.or(p.horizon);
        p.tolerance_sigma = o.tolerance_sigma.unwrap_or(p.tolerance_sigma);
    }

    pub fn validate(&self) -> Result<()> {
        let process = |n: &str| {
            self.processes
                .contains_key(n)
                .then_some(())
                .ok_or_else(|| Error::config(format!("unknown process `{n}`")))
        };
        let kernel = |n: &str| {
            self.kernels
                .contains_key(n)
                .then_some(())
                .ok_or_else(|| Error::config(format!("unknown kernel `{n}`")))
        };
        match (&self.plan, &self.pasting) {
            (Some(_), Some(_)) => return Err(Error::config("give either `plan` or `pasting`, not both")),
            (None, None) => return Err(Error::config("one of `plan` or `pasting` is required")),
            (Some(plan), None) => {
                if plan.stages.is_empty() {
                    return Err(Error::config("field `plan.stages`: at least one stage is required"));
                }
                for s in &plan.stages {
                    process(&s.process)?;
                    if let Some(k) = &s.kernel {
                        kernel(k)?;
                    }
                }
            }
            (None, Some(p)) => {
                process(&p.minus)?;
                process(&p.plus)?;
                kernel(&p.kernel_minus)?;
                kernel(&p.kernel_plus)?;
            }
        }
        let p = &self.params;
        if !(p.tolerance_sigma > 0.0) {
            return Err(Error::config("field `params.tolerance_sigma` must be positive"));
        }
        if p.horizon.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::config("field `params.horizon` must be positive"));
        }
        Ok(())
    }

    pub fn truncation(&self) -> Result<Truncation> {
        Truncation::new(self.params.max_revivals, self.params.horizon.unwrap_or(f64::INFINITY))
    }

    pub fn mc(&self) -> McConfig {
        McConfig {
            censor_cap: self.params.censor_cap,
            ..McConfig::new(self.params.samples, self.seed)
        }
    }

    pub fn is_pasting(&self) -> bool {
        self.pasting.is_some()
    }

    fn process(&self, name: &str) -> Result<&ProcessSpec> {
        self.processes
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown process `{name}`")))
    }

    fn kernel(&self, name: &str) -> Result<&KernelSpec> {
        self.kernels
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown kernel `{name}`")))
    }

    pub fn pasting_spec(&self) -> Result<PastingSpec> {
        let p = self
            .pasting
            .as_ref()
            .ok_or_else(|| Error::config("this command needs a `pasting` section"))?;
        PastingSpec::new(
            self.process(&p.minus)?.clone(),
            self.process(&p.plus)?.clone(),
            self.kernel(&p.kernel_minus)?.clone(),
            self.kernel(&p.kernel_plus)?.clone(),
        )
    }

    /// The explicit plan, or the alternating plan of the pasting.
    pub fn build_plan(&self) -> Result<ConcatenationPlan> {
        let truncation = self.truncation()?;
        if self.pasting.is_some() {
            return make_alternating_plan(&self.pasting_spec()?, truncation);
        }
        let plan = self.plan.as_ref().expect("validated");
        let stages = plan
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Stage {
                    process: self.process(&s.process)?.retagged(i as u32 + 1),
                    kernel: s.kernel.as_deref().map(|k| self.kernel(k).cloned()).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ConcatenationPlan::new(stages, truncation)
    }

    /// Configured starts, or every label of the first stage.
    pub fn resolved_starts(&self, plan: &ConcatenationPlan) -> Result<Vec<Start>> {
        if !self.starts.is_empty() {
            return Ok(self.starts.clone());
        }
        match &plan.stage(1).expect("plans have a first stage").space().base {
            StateSpaceDesc::FiniteLabels { labels } => Ok(labels
                .iter()
                .map(|l| Start {
                    stage: 1,
                    point: Value::Label(*l),
                })
                .collect()),
            StateSpaceDesc::RealInterval { .. } => Err(Error::config("field `starts`: required for interval spaces")),
        }
    }

    pub fn resolved_functions(&self) -> Vec<FunctionSpec> {
        if self.functions.is_empty() {
            vec![FunctionSpec::constant(1.0)]
        } else {
            self.functions.clone()
        }
    }
}
