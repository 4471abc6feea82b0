//! Monte Carlo estimators along composite paths, and Laplace inversion.
//!
//! Replicate `i` draws from its own stream `(seed, stream_offset + i)`, so every report
//! is reproducible bit for bit whatever the thread count. Per-path values are
//! collected in order and reduced sequentially.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concat::{evaluate_concat, revival_time, sample_concatenated, ConcatPath, ConcatenationPlan, StopReason};
use crate::error::{Error, Result};
use crate::functions::{FunctionSpec, PointSet};
use crate::oracle::{assemble_alternating, assemble_concatenated, exact_resolvent, Resolvent, SubGenerator};
use crate::pasting::first_entry_time;
use crate::process::{Path, Representation};
use crate::rng::{RngStream, StreamRng};
use crate::state_space::{SpacePoint, Value};
use crate::stats::{mean_stderr, CompensatedSum};

/// Sample size and randomness for one estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    /// First stream id; runs compared against each other should use disjoint ranges.
    #[serde(default)]
    pub stream_offset: u64,
    /// Largest tolerated fraction of truncated paths.
    #[serde(default = "default_cap")]
    pub censor_cap: f64,
}

fn default_cap() -> f64 {
    0.01
}

impl McConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        McConfig {
            samples,
            seed,
            stream_offset: 0,
            censor_cap: default_cap(),
        }
    }

    pub fn with_offset(mut self, stream_offset: u64) -> Self {
        self.stream_offset = stream_offset;
        self
    }

    fn check(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config(format!(
                "{} samples requested; at least 2 are needed for a standard error",
                self.samples
            )));
        }
        Ok(())
    }
}

/// A Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    /// Sample standard deviation over `√n`.
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Paths cut short by the horizon or the revival budget.
    pub censored_fraction: f64,
    /// Deterministic bound on the error caused by truncation.
    pub bias_bound: f64,
    /// Set when the censored fraction exceeds the cap and its bias is not negligible.
    pub flagged: bool,
}

impl EstimateReport {
    fn build(values: &[f64], cfg: &McConfig, censored: usize, bias: f64) -> Self {
        let (value, stderr) = mean_stderr(values);
        let censored_fraction = censored as f64 / values.len() as f64;
        EstimateReport {
            value,
            stderr,
            n_samples: values.len(),
            seed: cfg.seed,
            censored_fraction,
            bias_bound: bias,
            flagged: censored_fraction > cfg.censor_cap && bias > 0.1 * stderr,
        }
    }

    /// `sigma · stderr + bias_bound`.
    pub fn tolerance(&self, sigma: f64) -> f64 {
        sigma * self.stderr + self.bias_bound
    }

    /// Whether `target` lies within `sigma` standard errors (plus the bias bound).
    pub fn agrees_with(&self, target: f64, sigma: f64) -> bool {
        (self.value - target).abs() <= self.tolerance(sigma)
    }
}

/// A plan together with a starting stage and point; `project` evaluates functions on
/// untagged states (the pasted process `π(X)`).
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub plan: &'a ConcatenationPlan,
    pub stage: usize,
    pub start: SpacePoint,
    pub project: bool,
}

impl<'a> Model<'a> {
    pub fn new(plan: &'a ConcatenationPlan, stage: usize, value: impl Into<Value>) -> Result<Self> {
        let start = plan.start_point(stage, value.into())?;
        Ok(Model {
            plan,
            stage,
            start,
            project: false,
        })
    }

    pub fn projected(mut self) -> Self {
        self.project = true;
        self
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Result<ConcatPath> {
        sample_concatenated(self.plan, self.stage, &self.start, rng)
    }

    fn view(&self, p: SpacePoint) -> SpacePoint {
        if self.project {
            p.untagged()
        } else {
            p
        }
    }
}

fn replicate<T: Send>(cfg: &McConfig, f: impl Fn(u64, &mut StreamRng) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(cfg.seed, cfg.stream_offset + i).generator();
            f(i, &mut rng)
        })
        .collect()
}

fn truncated(cp: &ConcatPath) -> bool {
    matches!(cp.stop_reason(), StopReason::Censored | StopReason::RevivalCap)
}

/// `∫_0^{upto ∧ ζ} e^{-αt} f(X_t) dt` on one path, in the path's local time.
fn path_integral(path: &Path, alpha: f64, f: &dyn Fn(&SpacePoint) -> f64, upto: f64) -> f64 {
    let events = path.events();
    let end = path.lifetime().min(path.censored_at().unwrap_or(f64::INFINITY)).min(upto);
    let mut acc = CompensatedSum::new();
    let grid = matches!(path.representation(), Representation::Grid { .. });
    for (i, e) in events.iter().enumerate() {
        if e.time >= end {
            break;
        }
        let next = events.get(i + 1).map_or(end, |n| n.time.min(end));
        let fx = f(&e.state);
        let next_full = events.get(i + 1).is_some_and(|n| n.time <= end);
        if grid && next_full {
            let fy = f(&events[i + 1].state);
            let dt = next - e.time;
            acc.add(0.5 * dt * (fx * (-alpha * e.time).exp() + fy * (-alpha * next).exp()));
        } else if fx != 0.0 {
            // ∫_{t_i}^{t_{i+1}} e^{-αt} dt = e^{-αt_i}(1 − e^{-αΔ})/α
            acc.add(fx * (-alpha * e.time).exp() * -(-alpha * (next - e.time)).exp_m1() / alpha);
        }
    }
    acc.value()
}

/// The discounted integral of `f` along a composite, up to time `upto`.
fn concat_integral(cp: &ConcatPath, alpha: f64, f: &dyn Fn(&SpacePoint) -> f64, upto: f64) -> f64 {
    let mut acc = CompensatedSum::new();
    for (j, seg) in cp.segments().iter().enumerate() {
        let offset = cp.offset(j);
        if offset >= upto {
            break;
        }
        if seg.path.events().is_empty() {
            continue;
        }
        acc.add((-alpha * offset).exp() * path_integral(&seg.path, alpha, f, upto - offset));
    }
    acc.value()
}

/// Time after which the composite's discounted integral is unknown (for the tail bound).
fn truncation_time(cp: &ConcatPath) -> Option<f64> {
    match cp.stop_reason() {
        StopReason::Censored => cp.censor_time(),
        StopReason::RevivalCap => Some(cp.lifetime()),
        _ => None,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("alpha = {alpha} must be positive")));
    }
    Ok(())
}

/// `Û_α f(x)`: mean of `∫_0^{ζ ∧ T} e^{-αt} f(X_t) dt`.
pub fn mc_resolvent(model: &Model, alpha: f64, f: &FunctionSpec, cfg: &McConfig) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    cfg.check()?;
    let norm = f.sup_norm();
    let fv = |p: &SpacePoint| f.eval(&model.view(*p));
    let rows = replicate(cfg, |_, rng| {
        let cp = model.sample(rng)?;
        let tail = truncation_time(&cp).map(|t| norm * (-alpha * t).exp() / alpha);
        Ok((concat_integral(&cp, alpha, &fv, f64::INFINITY), tail))
    })?;
    Ok(summarize(&rows, cfg))
}

fn summarize(rows: &[(f64, Option<f64>)], cfg: &McConfig) -> EstimateReport {
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let censored = rows.iter().filter(|r| r.1.is_some()).count();
    let bias = rows.iter().filter_map(|r| r.1).collect::<CompensatedSum>().value() / rows.len() as f64;
    EstimateReport::build(&values, cfg, censored, bias)
}

/// `T̂_t f(x)`: mean of `f(X_t)`, with `f(Δ) = 0`.
pub fn mc_semigroup(model: &Model, t: f64, f: &FunctionSpec, cfg: &McConfig) -> Result<EstimateReport> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("time {t} must be finite and nonnegative")));
    }
    cfg.check()?;
    let norm = f.sup_norm();
    let rows = replicate(cfg, |_, rng| {
        let cp = model.sample(rng)?;
        Ok(match evaluate_concat(&cp, t) {
            Ok(p) => (f.eval(&model.view(p)), None),
            Err(Error::UndefinedRegion { .. }) => (0.0, Some(norm)),
            Err(e) => return Err(e),
        })
    })?;
    Ok(summarize(&rows, cfg))
}

/// Mean lifetime `Ê ζ`. Censored paths contribute their censoring time.
pub fn mc_lifetime(model: &Model, cfg: &McConfig) -> Result<EstimateReport> {
    cfg.check()?;
    let rows = replicate(cfg, |_, rng| {
        let cp = model.sample(rng)?;
        Ok(match cp.censor_time() {
            Some(c) => (c, Some(f64::INFINITY)),
            None => (cp.lifetime(), None),
        })
    })?;
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let censored = rows.iter().filter(|r| r.1.is_some()).count();
    let bias = if censored > 0 { f64::INFINITY } else { 0.0 };
    Ok(EstimateReport::build(&values, cfg, censored, bias))
}

/// The stopping time in Dynkin's formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stopping {
    /// The revival time `R^n`.
    Revival { n: usize },
    /// First entry into a set (of untagged states when the model is projected).
    FirstEntry { target: PointSet },
}

/// How `U_α f(X_τ)` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Continuation {
    /// Exact resolvent of the assembled generator (finite chains only).
    Oracle,
    /// `m` fresh paths from `X_τ`.
    NestedMc { m: usize },
}

/// The generator of a finite-chain model: the alternating two-copy cycle, or the
/// concatenated blocks the truncation lets a path reach.
pub struct ModelGenerator {
    sg: SubGenerator,
    alternating: bool,
    project: bool,
}

impl ModelGenerator {
    pub fn new(model: &Model) -> Result<Self> {
        let plan = model.plan;
        let (sg, alternating) = if plan.is_alternating() {
            let chain = |n: usize| {
                plan.stage(n)
                    .and_then(|s| s.process.as_chain())
                    .ok_or_else(|| Error::Unsupported("the oracle needs finite chains".into()))
            };
            let (m, p) = (chain(1)?, chain(2)?);
            let (s1, s2) = (plan.stage(1).unwrap(), plan.stage(2).unwrap());
            (
                assemble_alternating(m, p, s1.kernel.unwrap(), s2.kernel.unwrap())?,
                true,
            )
        } else {
            let n = (model.stage + plan.truncation().max_revivals).min(plan.stage_count().unwrap_or(usize::MAX));
            (assemble_concatenated(plan, n)?, false)
        };
        Ok(ModelGenerator {
            sg,
            alternating,
            project: model.project,
        })
    }

    /// `f` on the generator's states, untagged first when the model is projected.
    pub fn vector(&self, f: &FunctionSpec) -> DVector<f64> {
        self.sg.vector(|p| if self.project { f.eval(&p.untagged()) } else { f.eval(p) })
    }

    /// Row of a (tagged) model state; alternating tags fold onto the two copies.
    pub fn index(&self, p: &SpacePoint) -> Option<usize> {
        let key = match p {
            SpacePoint::Cemetery => return None,
            SpacePoint::Regular { tag, .. } if self.alternating => p.with_tag(if tag % 2 == 1 { 1 } else { 2 }),
            _ => *p,
        };
        self.sg.index_of(&key)
    }

    pub fn sub_generator(&self) -> &SubGenerator {
        &self.sg
    }
}

/// Exact `U_α f` on the states a model can visit, through the assembled generator.
pub struct ContinuationOracle {
    generator: ModelGenerator,
    values: DVector<f64>,
}

impl ContinuationOracle {
    pub fn new(model: &Model, alpha: f64, f: &FunctionSpec) -> Result<Self> {
        let generator = ModelGenerator::new(model)?;
        let values = exact_resolvent(&generator.sg, alpha, &generator.vector(f))?;
        Ok(ContinuationOracle { generator, values })
    }

    /// `U_α f(p)` for a (tagged) state of the model.
    pub fn value(&self, p: &SpacePoint) -> Result<f64> {
        if p.is_cemetery() {
            return Ok(0.0);
        }
        self.generator
            .index(p)
            .map(|i| self.values[i])
            .ok_or_else(|| Error::domain(format!("{p} is not a state of the assembled generator")))
    }

    pub fn sub_generator(&self) -> &SubGenerator {
        &self.generator.sg
    }
}

/// The stopping time on a sampled composite and the (tagged) state there.
fn stopping_time(model: &Model, cp: &ConcatPath, stopping: &Stopping) -> Result<(f64, SpacePoint)> {
    let tau = match stopping {
        Stopping::Revival { n } => revival_time(cp, *n),
        Stopping::FirstEntry { target } => first_entry_time(&cp.flatten(model.project), target),
    };
    if !tau.is_finite() {
        return Ok((f64::INFINITY, SpacePoint::Cemetery));
    }
    Ok((tau, evaluate_concat(cp, tau)?))
}

fn always_zero(model: &Model, stopping: &Stopping) -> bool {
    match stopping {
        Stopping::Revival { n } => *n < model.stage,
        Stopping::FirstEntry { target } => target.contains(&model.view(model.start)),
    }
}

/// Dynkin's formula at `τ`: per path, `∫_0^ζ − ∫_0^τ − e^{-ατ} U_α f(X_τ)` with all
/// three terms from the same path. The mean is the residual
/// `Û_α f(x) − Ê ∫_0^τ e^{-αt} f − Ê e^{-ατ} U_α f(X_τ)`.
pub fn dynkin_residual(
    model: &Model,
    stopping: &Stopping,
    alpha: f64,
    f: &FunctionSpec,
    continuation: Continuation,
    cfg: &McConfig,
) -> Result<EstimateReport> {
    check_alpha(alpha)?;
    cfg.check()?;
    if let Continuation::NestedMc { m } = continuation {
        if m < 10 {
            return Err(Error::config(format!("nested Monte Carlo needs at least 10 paths, got {m}")));
        }
    }
    let norm = f.sup_norm();
    if norm == 0.0 || always_zero(model, stopping) {
        // τ = 0: the continuation term is the estimate itself, on the same paths
        return Ok(EstimateReport::build(&vec![0.0; cfg.samples], cfg, 0, 0.0));
    }
    let oracle = match continuation {
        Continuation::Oracle => Some(ContinuationOracle::new(model, alpha, f)?),
        Continuation::NestedMc { .. } => None,
    };
    let fv = |p: &SpacePoint| f.eval(&model.view(*p));
    let rows = replicate(cfg, |i, rng| {
        let cp = model.sample(rng)?;
        let tail = truncation_time(&cp).map(|t| 2.0 * norm * (-alpha * t).exp() / alpha);
        let full = concat_integral(&cp, alpha, &fv, f64::INFINITY);
        let (tau, x_tau) = stopping_time(model, &cp, stopping)?;
        if !tau.is_finite() {
            return Ok((0.0, tail));
        }
        let pre = concat_integral(&cp, alpha, &fv, tau);
        let cont = match (&oracle, continuation) {
            (Some(o), _) => o.value(&x_tau)?,
            (None, Continuation::NestedMc { m }) => nested_resolvent(model, &x_tau, alpha, f, m, cfg, i)?,
            (None, Continuation::Oracle) => unreachable!(),
        };
        Ok((full - pre - (-alpha * tau).exp() * cont, tail))
    })?;
    Ok(summarize(&rows, cfg))
}

fn nested_resolvent(
    model: &Model,
    from: &SpacePoint,
    alpha: f64,
    f: &FunctionSpec,
    m: usize,
    cfg: &McConfig,
    outer: u64,
) -> Result<f64> {
    let stage = (1..)
        .take(1 << 20)
        .find(|&n| model.plan.stage(n).is_some_and(|s| s.contains(from)))
        .ok_or_else(|| Error::domain(format!("{from} belongs to no stage")))?;
    let inner = Model {
        stage,
        start: *from,
        ..*model
    };
    let fv = |p: &SpacePoint| f.eval(&inner.view(*p));
    let base = cfg.stream_offset + cfg.samples as u64 + outer * m as u64;
    let mut acc = CompensatedSum::new();
    for j in 0..m as u64 {
        let cp = inner.sample(&mut RngStream::new(cfg.seed, base + j).generator())?;
        acc.add(concat_integral(&cp, alpha, &fv, f64::INFINITY));
    }
    Ok(acc.value() / m as f64)
}

/// Bounded functional `Π g_i(X_{t_i})` of the pre-revival path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GSpec {
    pub times: Vec<f64>,
    pub functions: Vec<FunctionSpec>,
}

impl GSpec {
    /// `g ≡ 1`.
    pub fn one() -> Self {
        GSpec {
            times: Vec::new(),
            functions: Vec::new(),
        }
    }

    pub fn new(times: Vec<f64>, functions: Vec<FunctionSpec>) -> Result<Self> {
        if times.len() != functions.len() {
            return Err(Error::config("g needs one function per time"));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.first().is_some_and(|t| !(*t >= 0.0)) {
            return Err(Error::config("g times must be nonnegative and increasing"));
        }
        Ok(GSpec { times, functions })
    }

    fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Two expectations and their per-path difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gap: EstimateReport,
    pub direct: EstimateReport,
    pub kernel: EstimateReport,
}

/// Compares `Ê[f(X_{R^n}) G]` with `Ê[K^n f(X^n_{ζ−}) G]` on the same paths, where
/// `G = Π g_i(X_{t_i}) 1_{t_k < R^n} 1_{R^n < ∞}`.
pub fn revival_formula_test(model: &Model, n: usize, f: &FunctionSpec, g: &GSpec, cfg: &McConfig) -> Result<GapReport> {
    cfg.check()?;
    if n == 0 || n < model.stage {
        return Err(Error::domain(format!("revival {n} is not after the start stage {}", model.stage)));
    }
    if n - model.stage >= model.plan.truncation().max_revivals {
        return Err(Error::config(format!("revival {n} lies beyond the truncation")));
    }
    let stage = model
        .plan
        .stage(n)
        .ok_or_else(|| Error::domain(format!("the plan has no stage {n}")))?;
    let kernel = stage
        .kernel
        .ok_or_else(|| Error::domain(format!("stage {n} has no kernel")))?;
    let next_tag = model.plan.stage(n + 1).map(|s| s.tag).unwrap_or(0);
    let rows = replicate(cfg, |_, rng| {
        let cp = model.sample(rng)?;
        let r = revival_time(&cp, n);
        let cut = truncated(&cp) && !r.is_finite();
        if !r.is_finite() || !(g.last_time() < r) {
            return Ok((0.0, 0.0, cut));
        }
        let mut weight = 1.0;
        for (t, gi) in g.times.iter().zip(&g.functions) {
            weight *= gi.eval(&evaluate_concat(&cp, *t)?);
        }
        let seg = &cp.segments()[n - 1];
        let revived = seg.revival.expect("finite revival time");
        let exit = seg
            .path
            .exit_point()
            .and_then(|p| p.value())
            .ok_or_else(|| Error::RevivalUndefined("revived path without exit point".into()))?;
        let kf = kernel.row_for(&exit)?.expectation(|v| {
            f.eval(&SpacePoint::Regular {
                tag: next_tag,
                value: *v,
            })
        });
        Ok((f.eval(&revived) * weight, kf * weight, cut))
    })?;
    let direct: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let via_kernel: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let censored = rows.iter().filter(|r| r.2).count();
    Ok(GapReport {
        gap: EstimateReport::build(&diff, cfg, censored, 0.0),
        direct: EstimateReport::build(&direct, cfg, censored, 0.0),
        kernel: EstimateReport::build(&via_kernel, cfg, censored, 0.0),
    })
}

/// Post–Widder inversion, single-limit form:
/// `g(t) ≈ (−1)^k / k! · α^{k+1} φ^{(k)}(α)` at `α = k/t`.
///
/// `derivatives(α, k)` returns `φ(α), φ'(α), …, φ^{(k)}(α)`. The prefactor is formed in
/// log space so large `k` does not overflow.
pub fn post_widder_invert(derivatives: impl Fn(f64, usize) -> Result<Vec<f64>>, t: f64, k: usize) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("time {t} must be positive")));
    }
    if k == 0 {
        return Err(Error::domain("the inversion order k must be at least 1"));
    }
    let alpha = k as f64 / t;
    let d = derivatives(alpha, k)?;
    let dk = *d
        .get(k)
        .ok_or_else(|| Error::Numeric(format!("derivative oracle returned {} values, need {}", d.len(), k + 1)))?;
    if dk == 0.0 {
        return Ok(0.0);
    }
    let log_fact: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
    let sign = if k % 2 == 0 { dk.signum() } else { -dk.signum() };
    Ok(sign * ((k + 1) as f64 * alpha.ln() - log_fact + dk.abs().ln()).exp())
}

/// Derivatives of `φ(α) = (U_α f)(x)` for a finite chain:
/// `φ^{(j)}(α) = (−1)^j j! [(αI − Q)^{-(j+1)} f](x)`.
pub fn chain_laplace_derivatives<'a>(
    sg: &'a SubGenerator,
    f: &'a DVector<f64>,
    state: usize,
) -> impl Fn(f64, usize) -> Result<Vec<f64>> + 'a {
    move |alpha, k| {
        let res = Resolvent::new(sg, alpha)?;
        let mut v = f.clone();
        let mut fact = 1.0f64;
        let mut out = Vec::with_capacity(k + 1);
        for j in 0..=k {
            if j > 0 {
                fact *= j as f64;
            }
            v = res.solve(&v)?;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            out.push(sign * fact * v[state]);
        }
        if !fact.is_finite() {
            return Err(Error::Numeric(format!("{k}! overflows; use post_widder_chain")));
        }
        Ok(out)
    }
}

/// Post–Widder for all states of a chain at once: `(α(αI − Q)^{-1})^{k+1} f` at
/// `α = k/t`, which is the same quantity without factorials.
pub fn post_widder_chain(sg: &SubGenerator, f: &DVector<f64>, t: f64, k: usize) -> Result<DVector<f64>> {
    if !(t > 0.0 && t.is_finite()) || k == 0 {
        return Err(Error::domain("need t > 0 and k ≥ 1"));
    }
    let alpha = k as f64 / t;
    let res = Resolvent::new(sg, alpha)?;
    let mut v = f.clone();
    for _ in 0..=k {
        v = res.solve(&v)? * alpha;
    }
    Ok(v)
}
