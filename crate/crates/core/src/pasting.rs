//! Pasting two processes on overlapping spaces.
//!
//! The pasted process runs alternating tagged copies `{n} × X^{(-1)^n}` (odd `n`: the
//! minus process, even `n`: the plus process) and forgets the tag. Whether the result
//! is again Markov is checked two ways: the consistency conditions on the two
//! processes alone, and directly by comparing resolvents started from odd and even
//! copies of the same shared point.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::concat::{ConcatPath, ConcatenationPlan, Truncation};
use crate::error::{Error, Result};
use crate::estimate::{mc_resolvent, McConfig, Model};
use crate::functions::{FunctionSpec, PointSet};
use crate::oracle::{assemble_alternating, exact_entry_functionals, exact_resolvent, kernel_matrix, SubGenerator};
use crate::process::{sample_path, Path, ProcessSpec};
use crate::rng::RngStream;
use crate::state_space::{SpacePoint, StateSpaceDesc, Value};
use crate::stats::mean_stderr;
use crate::transfer::KernelSpec;

/// Two processes and the kernels moving each into the other's space.
#[derive(Clone, Debug, PartialEq)]
pub struct PastingSpec {
    minus: ProcessSpec,
    plus: ProcessSpec,
    kernel_minus: KernelSpec,
    kernel_plus: KernelSpec,
    shared: StateSpaceDesc,
}

/// Where a coordinate lies relative to the two spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Shared,
    MinusOnly,
    PlusOnly,
    Outside,
}

impl PastingSpec {
    pub fn new(minus: ProcessSpec, plus: ProcessSpec, kernel_minus: KernelSpec, kernel_plus: KernelSpec) -> Result<Self> {
        let shared = minus
            .space()
            .base
            .intersect(&plus.space().base)?
            .ok_or_else(|| Error::config("the two state spaces do not overlap"))?;
        let kernel_minus = kernel_minus.bind(&minus, &plus.space().base)?;
        let kernel_plus = kernel_plus.bind(&plus, &minus.space().base)?;
        Ok(PastingSpec {
            minus,
            plus,
            kernel_minus,
            kernel_plus,
            shared,
        })
    }

    pub fn minus(&self) -> &ProcessSpec {
        &self.minus
    }

    pub fn plus(&self) -> &ProcessSpec {
        &self.plus
    }

    pub fn kernel_minus(&self) -> &KernelSpec {
        &self.kernel_minus
    }

    pub fn kernel_plus(&self) -> &KernelSpec {
        &self.kernel_plus
    }

    pub fn shared(&self) -> &StateSpaceDesc {
        &self.shared
    }

    /// Same process and same kernel on both sides.
    pub fn is_identical(&self) -> bool {
        self.minus == self.plus && self.kernel_minus == self.kernel_plus
    }

    pub fn region(&self, v: &Value) -> Region {
        let m = self.minus.space().base.contains_value(v);
        let p = self.plus.space().base.contains_value(v);
        match (m, p) {
            (true, true) => Region::Shared,
            (true, false) => Region::MinusOnly,
            (false, true) => Region::PlusOnly,
            (false, false) => Region::Outside,
        }
    }

    /// Shared labels, when the spaces are finite.
    pub fn shared_points(&self) -> Option<Vec<Value>> {
        match &self.shared {
            StateSpaceDesc::FiniteLabels { labels } => Some(labels.iter().map(|l| Value::Label(*l)).collect()),
            StateSpaceDesc::RealInterval { .. } => None,
        }
    }

    fn in_region(&self, region: Region) -> impl Fn(&SpacePoint) -> bool + '_ {
        move |p| p.value().is_some_and(|v| self.region(&v) == region)
    }
}

/// The alternating plan: stage `n` is `{n} × X^{(-1)^n}`.
pub fn make_alternating_plan(ps: &PastingSpec, truncation: Truncation) -> Result<ConcatenationPlan> {
    ConcatenationPlan::alternating(
        ps.minus.clone(),
        ps.plus.clone(),
        &ps.kernel_minus,
        &ps.kernel_plus,
        truncation,
    )
}

/// `π(X)`: the composite with every tag erased.
pub fn project_path(cp: &ConcatPath) -> Path {
    cp.flatten(true)
}

/// First time the path is in a state satisfying `target`; infinite if it dies or is
/// censored first. Exact for step paths, the first grid time for diffusions.
pub fn first_entry_time_by(path: &Path, target: impl Fn(&SpacePoint) -> bool) -> f64 {
    path.events()
        .iter()
        .find(|e| target(&e.state))
        .map_or(f64::INFINITY, |e| e.time)
}

pub fn first_entry_time(path: &Path, target: &PointSet) -> f64 {
    first_entry_time_by(path, |p| target.contains(p))
}

/// Test functions for the consistency check. `g_minus[i]` and `g_plus[i]` are used
/// together; when both lists are empty the oracle uses the true resolvents
/// `U_α(f∘π)` from odd and even copies, and Monte Carlo uses `g^± = f`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFunctions {
    pub f: Vec<FunctionSpec>,
    #[serde(default)]
    pub g_minus: Vec<FunctionSpec>,
    #[serde(default)]
    pub g_plus: Vec<FunctionSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    Oracle,
    MonteCarlo { config: McConfig, horizon: f64 },
}

/// Which equality a residual belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Pre-entry integrals agree.
    Integral,
    /// Minus entry term against the plus revival term, `g^-` on both sides.
    EntryMinus,
    /// Plus entry term against the minus revival term, `g^+` on both sides.
    EntryPlus,
    /// Identical iterations: entry terms of the two sides.
    EntryTerms,
    /// Identical iterations: revival terms of the two sides.
    RevivalTerms,
}

/// The criterion applied: the general conditions, or the summand-by-summand comparison
/// that suffices for identical iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Alternating,
    Identical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub point: Value,
    pub condition: Condition,
    pub function: usize,
    pub minus_side: f64,
    pub plus_side: f64,
    /// Signed `minus_side − plus_side`.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub criterion: Criterion,
    pub alpha: f64,
    pub residuals: Vec<Residual>,
    pub pass: bool,
}

/// The six expectations at one shared point.
#[derive(Clone, Copy, Debug, Default)]
struct SideTerms {
    integral: (f64, f64),
    entry: (f64, f64),
    revival: (f64, f64),
}

/// Value and variance-of-mean of each term, per side.
type Terms = [SideTerms; 2];

/// Evaluates the consistency conditions at every shared point (every shared label for
/// finite spaces, `points` otherwise).
pub fn check_consistency(
    ps: &PastingSpec,
    alpha: f64,
    functions: &ConsistencyFunctions,
    engine: Engine,
    points: Option<&[Value]>,
    sigma: f64,
) -> Result<ConsistencyReport> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha = {alpha} must be positive")));
    }
    if functions.g_minus.len() != functions.g_plus.len() {
        return Err(Error::config("g_minus and g_plus must have the same length"));
    }
    if functions.f.is_empty() {
        return Err(Error::config("at least one test function f is required"));
    }
    let points: Vec<Value> = match points {
        Some(p) => p.to_vec(),
        None => ps
            .shared_points()
            .ok_or_else(|| Error::config("interval spaces need explicit shared points"))?,
    };
    if let Some(v) = points.iter().find(|v| ps.region(v) != Region::Shared) {
        return Err(Error::domain(format!("{v} is not a shared point")));
    }
    let criterion = if ps.is_identical() {
        Criterion::Identical
    } else {
        Criterion::Alternating
    };
    let oracle = match engine {
        Engine::Oracle => Some(OracleSides::new(ps)?),
        Engine::MonteCarlo { .. } => None,
    };
    let mut residuals = Vec::new();
    for (fi, f) in functions.f.iter().enumerate() {
        let pairs: Vec<(Option<&FunctionSpec>, Option<&FunctionSpec>)> = if functions.g_minus.is_empty() {
            vec![(None, None)]
        } else {
            functions.g_minus.iter().zip(&functions.g_plus).map(|(a, b)| (Some(a), Some(b))).collect()
        };
        for (gi, (gm, gp)) in pairs.into_iter().enumerate() {
            let index = fi * functions.g_minus.len().max(1) + gi;
            for (k, x) in points.iter().enumerate() {
                let terms: Terms = match (&oracle, engine) {
                    (Some(o), _) => o.terms(ps, alpha, f, gm, gp, x)?,
                    (None, Engine::MonteCarlo { config, horizon }) => {
                        let gm = gm.unwrap_or(f);
                        let gp = gp.unwrap_or(f);
                        let stride = 2 * config.samples as u64 * (k + points.len() * index) as u64;
                        mc_terms(ps, alpha, f, gm, gp, x, &config.with_offset(config.stream_offset + stride), horizon)?
                    }
                    (None, Engine::Oracle) => unreachable!(),
                };
                let tol = |a: (f64, f64), b: (f64, f64)| match engine {
                    Engine::Oracle => 1e-9,
                    Engine::MonteCarlo { .. } => sigma * (a.1 + b.1).sqrt(),
                };
                let [m, p] = terms;
                let comparisons = match criterion {
                    Criterion::Alternating => [
                        (Condition::Integral, m.integral, p.integral),
                        (Condition::EntryMinus, m.entry, p.revival),
                        (Condition::EntryPlus, p.entry, m.revival),
                    ],
                    Criterion::Identical => [
                        (Condition::Integral, m.integral, p.integral),
                        (Condition::EntryTerms, m.entry, p.entry),
                        (Condition::RevivalTerms, m.revival, p.revival),
                    ],
                };
                for (condition, a, b) in comparisons {
                    let residual = a.0 - b.0;
                    let tolerance = tol(a, b);
                    residuals.push(Residual {
                        point: *x,
                        condition,
                        function: index,
                        minus_side: a.0,
                        plus_side: b.0,
                        residual,
                        tolerance,
                        pass: residual.abs() <= tolerance,
                    });
                }
            }
        }
    }
    let pass = residuals.iter().all(|r| r.pass);
    Ok(ConsistencyReport {
        criterion,
        alpha,
        residuals,
        pass,
    })
}

/// Sub-generators of both sides, tag 0, plus the two-copy cycle for default `g^±`.
struct OracleSides {
    minus: SubGenerator,
    plus: SubGenerator,
    cycle: SubGenerator,
}

impl OracleSides {
    fn new(ps: &PastingSpec) -> Result<Self> {
        let chain = |p: &ProcessSpec| {
            p.as_chain()
                .cloned()
                .ok_or_else(|| Error::Unsupported("the oracle engine needs finite chains on both sides".into()))
        };
        let (m, p) = (chain(&ps.minus)?, chain(&ps.plus)?);
        Ok(OracleSides {
            minus: SubGenerator::from_chain(&m, 0),
            plus: SubGenerator::from_chain(&p, 0),
            cycle: assemble_alternating(&m, &p, &ps.kernel_minus, &ps.kernel_plus)?,
        })
    }

    fn terms(
        &self,
        ps: &PastingSpec,
        alpha: f64,
        f: &FunctionSpec,
        gm: Option<&FunctionSpec>,
        gp: Option<&FunctionSpec>,
        x: &Value,
    ) -> Result<Terms> {
        // g^- on minus states, g^+ on plus states
        let (g_minus, g_plus) = match (gm, gp) {
            (Some(a), Some(b)) => (
                self.minus.vector(|s| a.eval(s)),
                self.plus.vector(|s| b.eval(s)),
            ),
            _ => {
                let u = exact_resolvent(&self.cycle, alpha, &self.cycle.vector(|s| f.eval(&s.untagged())))?;
                let n = self.minus.len();
                (u.rows(0, n).into_owned(), u.rows(n, self.plus.len()).into_owned())
            }
        };
        let minus_chain = ps.minus.as_chain().expect("checked");
        let plus_chain = ps.plus.as_chain().expect("checked");
        let km_gp = kernel_matrix(&ps.kernel_minus, minus_chain, self.plus.states())? * &g_plus;
        let kp_gm = kernel_matrix(&ps.kernel_plus, plus_chain, self.minus.states())? * &g_minus;
        let side = |sg: &SubGenerator, target: Region, g: &DVector<f64>, h: &DVector<f64>| -> Result<SideTerms> {
            let fv = sg.vector(|s| f.eval(s));
            let i = sg
                .index_of(&SpacePoint::Regular { tag: 0, value: *x })
                .ok_or_else(|| Error::domain(format!("{x} is not a state")))?;
            let into = ps.in_region(target);
            if !sg.states().iter().any(&into) {
                // the target set is empty: τ = ∞, only the killed resolvent remains
                let parts = exact_entry_functionals(sg, alpha, |_| false, &fv, g, h)?;
                return Ok(SideTerms {
                    integral: (parts.integral[i], 0.0),
                    entry: (0.0, 0.0),
                    revival: (parts.kill[i], 0.0),
                });
            }
            let parts = exact_entry_functionals(sg, alpha, into, &fv, g, h)?;
            Ok(SideTerms {
                integral: (parts.integral[i], 0.0),
                entry: (parts.boundary[i], 0.0),
                revival: (parts.kill[i], 0.0),
            })
        };
        Ok([
            side(&self.minus, Region::MinusOnly, &g_minus, &km_gp)?,
            side(&self.plus, Region::PlusOnly, &g_plus, &kp_gm)?,
        ])
    }
}

#[allow(clippy::too_many_arguments)]
fn mc_terms(
    ps: &PastingSpec,
    alpha: f64,
    f: &FunctionSpec,
    gm: &FunctionSpec,
    gp: &FunctionSpec,
    x: &Value,
    cfg: &McConfig,
    horizon: f64,
) -> Result<Terms> {
    use rayon::prelude::*;
    let side = |spec: &ProcessSpec, target: Region, g: &FunctionSpec, kernel: &KernelSpec, g_other: &FunctionSpec, offset: u64| -> Result<SideTerms> {
        let start = SpacePoint::Regular {
            tag: spec.tag(),
            value: *x,
        };
        let into = ps.in_region(target);
        let rows: Vec<(f64, f64, f64)> = (0..cfg.samples as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = RngStream::new(cfg.seed, offset + i).generator();
                let path = sample_path(spec, &start, horizon, &mut rng)?;
                let tau = first_entry_time_by(&path, &into);
                let zeta = path.lifetime();
                let fv = |p: &SpacePoint| f.eval(p);
                let a = segment_integral(&path, alpha, &fv, tau);
                let b = if tau < zeta {
                    (-alpha * tau).exp() * g.eval(&path.evaluate(tau))
                } else {
                    0.0
                };
                let c = match path.exit_point().and_then(|p| p.value()) {
                    Some(exit) if zeta < tau => {
                        let kg = kernel.row_for(&exit)?.expectation(|v| g_other.eval(&SpacePoint::regular(0, *v)));
                        (-alpha * zeta).exp() * kg
                    }
                    _ => 0.0,
                };
                Ok((a, b, c))
            })
            .collect::<Result<_>>()?;
        let stat = |k: usize| {
            let v: Vec<f64> = rows.iter().map(|r| [r.0, r.1, r.2][k]).collect();
            let (m, se) = mean_stderr(&v);
            (m, se * se)
        };
        Ok(SideTerms {
            integral: stat(0),
            entry: stat(1),
            revival: stat(2),
        })
    };
    let n = cfg.samples as u64;
    Ok([
        side(&ps.minus, Region::MinusOnly, gm, &ps.kernel_minus, gp, cfg.stream_offset)?,
        side(&ps.plus, Region::PlusOnly, gp, &ps.kernel_plus, gm, cfg.stream_offset + n)?,
    ])
}

fn segment_integral(path: &Path, alpha: f64, f: &dyn Fn(&SpacePoint) -> f64, upto: f64) -> f64 {
    let events = path.events();
    let end = path.lifetime().min(path.censored_at().unwrap_or(f64::INFINITY)).min(upto);
    events
        .iter()
        .enumerate()
        .take_while(|(_, e)| e.time < end)
        .map(|(i, e)| {
            let next = events.get(i + 1).map_or(end, |n| n.time.min(end));
            f(&e.state) * (-alpha * e.time).exp() * -(-alpha * (next - e.time)).exp_m1() / alpha
        })
        .sum()
}

/// Outcome of the odd/even comparison at one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The point lies in only one of the spaces, so only one parity can start there.
    SingleSidedSkipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub point: Value,
    pub odd: f64,
    pub even: f64,
    /// `odd − even`.
    pub difference: f64,
    pub pooled_stderr: f64,
    pub bias_bound: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub alpha: f64,
    pub sigma: f64,
    pub points: Vec<ProjectionPoint>,
    pub pass: bool,
}

/// Estimates `U_α(f∘π)` from the odd copy `(odd, x)` and the even copy `(even, x)` on
/// disjoint streams and tests the difference against `sigma` pooled standard errors.
pub fn projection_criterion_test(
    plan: &ConcatenationPlan,
    alpha: f64,
    f: &FunctionSpec,
    points: &[Value],
    copies: (usize, usize),
    cfg: &McConfig,
    sigma: f64,
) -> Result<ProjectionReport> {
    let (odd, even) = copies;
    if odd % 2 != 1 || even % 2 != 0 {
        return Err(Error::domain(format!("copies ({odd}, {even}) must be (odd, even)")));
    }
    let mut out = Vec::with_capacity(points.len());
    for (k, x) in points.iter().enumerate() {
        let admissible = |n: usize| plan.stage(n).is_some_and(|s| s.process.space().base.contains_value(x));
        if !(admissible(odd) && admissible(even)) {
            out.push(ProjectionPoint {
                point: *x,
                odd: f64::NAN,
                even: f64::NAN,
                difference: f64::NAN,
                pooled_stderr: f64::NAN,
                bias_bound: 0.0,
                verdict: Verdict::SingleSidedSkipped,
            });
            continue;
        }
        let base = cfg.stream_offset + 2 * k as u64 * cfg.samples as u64;
        let a = mc_resolvent(&Model::new(plan, odd, *x)?.projected(), alpha, f, &cfg.with_offset(base))?;
        let b = mc_resolvent(
            &Model::new(plan, even, *x)?.projected(),
            alpha,
            f,
            &cfg.with_offset(base + cfg.samples as u64),
        )?;
        let difference = a.value - b.value;
        let pooled = a.stderr.hypot(b.stderr);
        let bias = a.bias_bound + b.bias_bound;
        out.push(ProjectionPoint {
            point: *x,
            odd: a.value,
            even: b.value,
            difference,
            pooled_stderr: pooled,
            bias_bound: bias,
            verdict: if difference.abs() <= sigma * pooled + bias {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
        });
    }
    let pass = out.iter().all(|p| p.verdict != Verdict::Fail);
    Ok(ProjectionReport {
        alpha,
        sigma,
        points: out,
        pass,
    })
}
