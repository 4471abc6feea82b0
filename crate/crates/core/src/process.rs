//! Paths of killed processes and the two built-in process families.
//!
//! A [`Path`] is a right-continuous step trajectory: the state of the last event at or
//! before `t` while `t < ζ`, the cemetery from `ζ` on. Finite chains are sampled
//! exactly (exponential holding times, jump/kill competition). Interval diffusions use
//! Euler–Maruyama on a fixed grid and die at the first grid time outside the open
//! interval through a killing endpoint, so their lifetimes carry an `O(√dt)` bias.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::state_space::{Label, SpacePoint, StateSpaceDesc, TaggedSpace, Value};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub state: SpacePoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Representation {
    PiecewiseConstant,
    Grid { dt: f64 },
}

/// A sampled trajectory with explicit lifetime.
///
/// `censored_at = Some(h)` means sampling stopped at the horizon `h` while the process
/// was still alive; the lifetime is then recorded as infinite and the path is only
/// known on `[0, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    events: Vec<Event>,
    lifetime: f64,
    censored_at: Option<f64>,
    left_limit: Option<SpacePoint>,
    repr: Representation,
}

impl Path {
    /// The dead path `[Δ]`.
    pub fn dead() -> Self {
        Path {
            events: Vec::new(),
            lifetime: 0.0,
            censored_at: None,
            left_limit: None,
            repr: Representation::PiecewiseConstant,
        }
    }

    /// Builds a path from events, checking the structural invariants.
    pub fn new(events: Vec<Event>, lifetime: f64, repr: Representation) -> Result<Self> {
        if !(lifetime >= 0.0) {
            return Err(Error::domain(format!("lifetime {lifetime} must be nonnegative")));
        }
        if events.is_empty() != (lifetime == 0.0) {
            return Err(Error::domain(
                "a path has no events exactly when its lifetime is zero",
            ));
        }
        if let Some(first) = events.first() {
            if first.time != 0.0 {
                return Err(Error::domain("the first event must be at time 0"));
            }
        }
        for w in events.windows(2) {
            if !(w[0].time < w[1].time) {
                return Err(Error::domain("event times must be strictly increasing"));
            }
        }
        if let Some(last) = events.last() {
            if !(last.time < lifetime) {
                return Err(Error::domain("no event may occur at or after the lifetime"));
            }
        }
        if events.iter().any(|e| e.state.is_cemetery()) {
            return Err(Error::domain("event states must be regular"));
        }
        Ok(Path {
            events,
            lifetime,
            censored_at: None,
            left_limit: None,
            repr,
        })
    }

    /// Assembles a path without validation; callers keep the invariants.
    pub(crate) fn from_parts(
        events: Vec<Event>,
        lifetime: f64,
        censored_at: Option<f64>,
        left_limit: Option<SpacePoint>,
        repr: Representation,
    ) -> Self {
        Path {
            events,
            lifetime,
            censored_at,
            left_limit,
            repr,
        }
    }

    pub(crate) fn left_limit(&self) -> Option<SpacePoint> {
        self.left_limit
    }

    /// Marks the path as observed only up to `horizon` (lifetime becomes infinite).
    pub fn censor(mut self, horizon: f64) -> Self {
        self.events.retain(|e| e.time < horizon);
        self.lifetime = f64::INFINITY;
        self.censored_at = Some(horizon);
        self.left_limit = None;
        self
    }

    /// Records an explicit left limit at death (boundary exit points of diffusions).
    pub fn with_left_limit(mut self, p: SpacePoint) -> Self {
        self.left_limit = Some(p);
        self
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn lifetime(&self) -> f64 {
        self.lifetime
    }

    pub fn censored_at(&self) -> Option<f64> {
        self.censored_at
    }

    pub fn is_censored(&self) -> bool {
        self.censored_at.is_some()
    }

    pub fn representation(&self) -> Representation {
        self.repr
    }

    pub fn is_dead(&self) -> bool {
        self.lifetime == 0.0 && self.censored_at.is_none()
    }

    /// Whether the state at `t` is known (always, unless `t` is past the censoring time).
    pub fn is_observed(&self, t: f64) -> bool {
        self.censored_at.is_none_or(|c| t < c)
    }

    /// Index of the event active at `t`, if any.
    fn active(&self, t: f64) -> Option<usize> {
        let k = self.events.partition_point(|e| e.time <= t);
        k.checked_sub(1)
    }

    /// `X_t`. Past a censoring time the last observed state is returned; check
    /// [`Path::is_observed`] first when that matters.
    pub fn evaluate(&self, t: f64) -> SpacePoint {
        if t >= self.lifetime {
            return SpacePoint::Cemetery;
        }
        match self.active(t) {
            Some(i) => self.events[i].state,
            None => SpacePoint::Cemetery,
        }
    }

    /// The shifted path `Θ_r`: `evaluate(shift(p, r), t) = evaluate(p, r + t)`.
    pub fn shift(&self, r: f64) -> Path {
        if r == 0.0 {
            return self.clone();
        }
        if let Some(c) = self.censored_at {
            if r >= c {
                return Path {
                    events: Vec::new(),
                    lifetime: f64::INFINITY,
                    censored_at: Some(0.0),
                    left_limit: None,
                    repr: self.repr,
                };
            }
        }
        let lifetime = (self.lifetime - r).max(0.0);
        if lifetime == 0.0 {
            return Path {
                repr: self.repr,
                ..Path::dead()
            };
        }
        let i = self.active(r).expect("alive at r implies an active event");
        let mut events = Vec::with_capacity(self.events.len() - i);
        events.push(Event {
            time: 0.0,
            state: self.events[i].state,
        });
        for e in &self.events[i + 1..] {
            let time = e.time - r;
            if time >= lifetime {
                break;
            }
            match events.last_mut() {
                // rounding can merge two shifted instants; the later state wins
                Some(last) if last.time >= time => last.state = e.state,
                _ => events.push(Event { time, state: e.state }),
            }
        }
        Path {
            events,
            lifetime,
            censored_at: self.censored_at.map(|c| c - r),
            left_limit: self.left_limit,
            repr: self.repr,
        }
    }

    /// The left limit `X_{ζ−}`, when the path died at a finite time.
    pub fn exit_point(&self) -> Option<SpacePoint> {
        if self.censored_at.is_some() || !self.lifetime.is_finite() || self.events.is_empty() {
            return None;
        }
        self.left_limit.or_else(|| self.events.last().map(|e| e.state))
    }
}

/// Free function form of [`Path::evaluate`].
pub fn evaluate(path: &Path, t: f64) -> SpacePoint {
    path.evaluate(t)
}

/// Free function form of [`Path::shift`].
pub fn shift(path: &Path, r: f64) -> Path {
    path.shift(r)
}

/// Free function form of [`Path::exit_point`].
pub fn exit_point(path: &Path) -> Option<SpacePoint> {
    path.exit_point()
}

/// A continuous-time chain on a finite label space with per-state killing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ChainDoc", into = "ChainDoc")]
pub struct FiniteChain {
    space: TaggedSpace,
    labels: Vec<Label>,
    rates: Vec<Vec<f64>>,
    kill: Vec<f64>,
    index: HashMap<Label, usize>,
    total: Vec<f64>,
}

impl PartialEq for FiniteChain {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space && self.rates == other.rates && self.kill == other.kill
    }
}

impl FiniteChain {
    /// `rates[i][j]` is the jump rate from label `i` to label `j`; the diagonal is ignored.
    pub fn new(space: TaggedSpace, mut rates: Vec<Vec<f64>>, kill: Vec<f64>) -> Result<Self> {
        space.base.validate()?;
        let labels = match &space.base {
            StateSpaceDesc::FiniteLabels { labels } => labels.clone(),
            StateSpaceDesc::RealInterval { .. } => {
                return Err(Error::config("a finite chain needs a label space"))
            }
        };
        let n = labels.len();
        if rates.len() != n || rates.iter().any(|r| r.len() != n) || kill.len() != n {
            return Err(Error::config(format!(
                "rate matrix and kill vector must be sized to the {n} labels"
            )));
        }
        for (i, row) in rates.iter_mut().enumerate() {
            row[i] = 0.0;
            for &q in row.iter() {
                if !q.is_finite() || q < 0.0 {
                    return Err(Error::config(format!("jump rate {q} is not a finite nonnegative number")));
                }
            }
        }
        for &c in &kill {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::config(format!("kill rate {c} is not a finite nonnegative number")));
            }
        }
        let total = rates
            .iter()
            .zip(&kill)
            .map(|(row, c)| row.iter().sum::<f64>() + c)
            .collect();
        let index = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        Ok(FiniteChain {
            space,
            labels,
            rates,
            kill,
            index,
            total,
        })
    }

    /// Builds a chain from `(from, to, rate)` and `(state, kill_rate)` lists.
    pub fn from_lists(
        tag: u32,
        labels: &[&str],
        jumps: &[(&str, &str, f64)],
        kills: &[(&str, f64)],
    ) -> Result<Self> {
        let base = StateSpaceDesc::labels(labels)?;
        let n = labels.len();
        let pos = |s: &str| {
            labels
                .iter()
                .position(|l| *l == s)
                .ok_or_else(|| Error::config(format!("unknown label {s}")))
        };
        let mut rates = vec![vec![0.0; n]; n];
        for &(a, b, q) in jumps {
            rates[pos(a)?][pos(b)?] += q;
        }
        let mut kill = vec![0.0; n];
        for &(a, c) in kills {
            kill[pos(a)?] += c;
        }
        FiniteChain::new(TaggedSpace::new(tag, base), rates, kill)
    }

    pub fn space(&self) -> &TaggedSpace {
        &self.space
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn kill(&self) -> &[f64] {
        &self.kill
    }

    pub fn index_of(&self, label: Label) -> Option<usize> {
        self.index.get(&label).copied()
    }

    /// Total exit rate (jumps plus killing) of each state.
    pub fn total_rates(&self) -> &[f64] {
        &self.total
    }

    /// Whether a chain started in `start` reaches Δ or an absorbing state almost surely.
    pub fn terminates_from(&self, start: usize) -> bool {
        let n = self.labels.len();
        // states from which a terminal state (killing or absorbing) is reachable
        let mut good: Vec<bool> = (0..n).map(|i| self.kill[i] > 0.0 || self.total[i] == 0.0).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                if !good[i] && (0..n).any(|j| self.rates[i][j] > 0.0 && good[j]) {
                    good[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            if !good[i] {
                return false;
            }
            for j in 0..n {
                if self.rates[i][j] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        true
    }

    fn sample(&self, tag: u32, start: usize, horizon: f64, rng: &mut StreamRng) -> Path {
        let point = |i: usize| SpacePoint::Regular {
            tag,
            value: Value::Label(self.labels[i]),
        };
        let mut events = vec![Event {
            time: 0.0,
            state: point(start),
        }];
        let mut state = start;
        let mut t = 0.0;
        loop {
            let total = self.total[state];
            if total == 0.0 {
                return Path {
                    events,
                    lifetime: f64::INFINITY,
                    censored_at: None,
                    left_limit: None,
                    repr: Representation::PiecewiseConstant,
                };
            }
            let hold = rng.exponential(total);
            let next = t + hold;
            if next >= horizon {
                return Path {
                    events,
                    lifetime: f64::INFINITY,
                    censored_at: Some(horizon),
                    left_limit: None,
                    repr: Representation::PiecewiseConstant,
                };
            }
            let mut u = rng.uniform() * total;
            let mut target = None;
            for (j, &q) in self.rates[state].iter().enumerate() {
                if q > 0.0 {
                    if u < q {
                        target = Some(j);
                        break;
                    }
                    u -= q;
                }
            }
            // A zero holding time would duplicate an event instant; it has
            // probability 2^-53 per draw and is resolved by overwriting.
            match target {
                Some(j) if next > t => {
                    t = next;
                    events.push(Event { time: t, state: point(j) });
                    state = j;
                }
                Some(j) => {
                    events.last_mut().unwrap().state = point(j);
                    state = j;
                }
                None => {
                    let lifetime = if next > t { next } else { f64::from_bits(t.to_bits() + 1) };
                    return Path {
                        events,
                        lifetime,
                        censored_at: None,
                        left_limit: None,
                        repr: Representation::PiecewiseConstant,
                    };
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ChainDoc {
    #[serde(default)]
    tag: u32,
    space: StateSpaceDesc,
    #[serde(default)]
    rates: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    kill: BTreeMap<String, f64>,
}

impl TryFrom<ChainDoc> for FiniteChain {
    type Error = Error;

    fn try_from(doc: ChainDoc) -> Result<Self> {
        let labels: Vec<&str> = match &doc.space {
            StateSpaceDesc::FiniteLabels { labels } => labels.iter().map(|l| l.as_str()).collect(),
            StateSpaceDesc::RealInterval { .. } => {
                return Err(Error::config("a chain needs a label space"))
            }
        };
        let jumps: Vec<(&str, &str, f64)> = doc
            .rates
            .iter()
            .flat_map(|(a, row)| row.iter().map(move |(b, q)| (a.as_str(), b.as_str(), *q)))
            .collect();
        let kills: Vec<(&str, f64)> = doc.kill.iter().map(|(a, c)| (a.as_str(), *c)).collect();
        FiniteChain::from_lists(doc.tag, &labels, &jumps, &kills)
    }
}

impl From<FiniteChain> for ChainDoc {
    fn from(c: FiniteChain) -> Self {
        let mut rates = BTreeMap::new();
        let mut kill = BTreeMap::new();
        for (i, a) in c.labels.iter().enumerate() {
            let row: BTreeMap<String, f64> = c.rates[i]
                .iter()
                .enumerate()
                .filter(|(_, q)| **q > 0.0)
                .map(|(j, q)| (c.labels[j].to_string(), *q))
                .collect();
            if !row.is_empty() {
                rates.insert(a.to_string(), row);
            }
            if c.kill[i] > 0.0 {
                kill.insert(a.to_string(), c.kill[i]);
            }
        }
        ChainDoc {
            tag: c.space.tag,
            space: c.space.base,
            rates,
            kill,
        }
    }
}

/// Named drift coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Drift {
    Zero,
    Constant(f64),
    /// `θ (μ − x)`
    OrnsteinUhlenbeck { theta: f64, mu: f64 },
}

impl Drift {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            Drift::Zero => 0.0,
            Drift::Constant(c) => c,
            Drift::OrnsteinUhlenbeck { theta, mu } => theta * (mu - x),
        }
    }
}

/// Named diffusion coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigma {
    Constant(f64),
}

impl Sigma {
    pub fn at(&self, _x: f64) -> f64 {
        match *self {
            Sigma::Constant(s) => s,
        }
    }
}

fn parse_args(s: &str, name: &str) -> Option<Vec<f64>> {
    let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
    inner.split(',').map(|a| a.trim().parse().ok()).collect()
}

impl FromStr for Drift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "zero" | "bm" => return Ok(Drift::Zero),
            _ => {}
        }
        if let Some(args) = parse_args(s, "const") {
            if let [c] = args[..] {
                return Ok(Drift::Constant(c));
            }
        }
        if let Some(args) = parse_args(s, "ou") {
            if let [theta, mu] = args[..] {
                return Ok(Drift::OrnsteinUhlenbeck { theta, mu });
            }
        }
        Err(Error::config(format!("unknown drift {s:?}")))
    }
}

impl fmt::Display for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => f.write_str("zero"),
            Drift::Constant(c) => write!(f, "const({c})"),
            Drift::OrnsteinUhlenbeck { theta, mu } => write!(f, "ou({theta},{mu})"),
        }
    }
}

impl FromStr for Sigma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "unit" | "bm" => return Ok(Sigma::Constant(1.0)),
            _ => {}
        }
        if let Some(args) = parse_args(s, "const") {
            if let [c] = args[..] {
                if c > 0.0 && c.is_finite() {
                    return Ok(Sigma::Constant(c));
                }
            }
        }
        Err(Error::config(format!("unknown sigma {s:?}")))
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sigma::Constant(c) => write!(f, "const({c})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Lo,
    Hi,
}

/// Euler–Maruyama diffusion on a real interval, killed at a subset of its endpoints
/// and reflected at the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiffusionDoc", into = "DiffusionDoc")]
pub struct IntervalDiffusion {
    space: TaggedSpace,
    lo: f64,
    hi: f64,
    drift: Drift,
    sigma: Sigma,
    kill_lo: bool,
    kill_hi: bool,
    dt: f64,
}

impl IntervalDiffusion {
    pub fn new(space: TaggedSpace, drift: Drift, sigma: Sigma, killing: &[Endpoint], dt: f64) -> Result<Self> {
        space.base.validate()?;
        let (lo, hi) = match space.base {
            StateSpaceDesc::RealInterval { lo, hi, .. } => (lo, hi),
            StateSpaceDesc::FiniteLabels { .. } => {
                return Err(Error::config("a diffusion needs an interval space"))
            }
        };
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("time step {dt} must be positive")));
        }
        Ok(IntervalDiffusion {
            space,
            lo,
            hi,
            drift,
            sigma,
            kill_lo: killing.contains(&Endpoint::Lo),
            kill_hi: killing.contains(&Endpoint::Hi),
            dt,
        })
    }

    /// Standard Brownian motion on `[lo, hi]` killed at both ends.
    pub fn brownian(tag: u32, lo: f64, hi: f64, dt: f64) -> Result<Self> {
        IntervalDiffusion::new(
            TaggedSpace::new(tag, StateSpaceDesc::interval(lo, hi, [true, true])?),
            Drift::Zero,
            Sigma::Constant(1.0),
            &[Endpoint::Lo, Endpoint::Hi],
            dt,
        )
    }

    pub fn space(&self) -> &TaggedSpace {
        &self.space
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Endpoints at which the process is killed.
    pub fn killing_points(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.kill_lo {
            out.push(self.lo);
        }
        if self.kill_hi {
            out.push(self.hi);
        }
        out
    }

    fn reflect(&self, mut x: f64) -> f64 {
        // fold back into [lo, hi]; steps larger than the interval are clamped
        if x < self.lo {
            x = (2.0 * self.lo - x).min(self.hi);
        }
        if x > self.hi {
            x = (2.0 * self.hi - x).max(self.lo);
        }
        x
    }

    fn sample(&self, tag: u32, start: f64, horizon: f64, rng: &mut StreamRng) -> Path {
        let repr = Representation::Grid { dt: self.dt };
        let mut events = vec![Event {
            time: 0.0,
            state: SpacePoint::regular(tag, start),
        }];
        let sqrt_dt = self.dt.sqrt();
        let mut x = start;
        let mut k: u64 = 0;
        loop {
            k += 1;
            let t = k as f64 * self.dt;
            if t >= horizon {
                return Path {
                    events,
                    lifetime: f64::INFINITY,
                    censored_at: Some(horizon),
                    left_limit: None,
                    repr,
                };
            }
            x += self.drift.at(x) * self.dt + self.sigma.at(x) * sqrt_dt * rng.standard_normal();
            let exit = if self.kill_lo && x <= self.lo {
                Some(self.lo)
            } else if self.kill_hi && x >= self.hi {
                Some(self.hi)
            } else {
                None
            };
            if let Some(b) = exit {
                return Path {
                    events,
                    lifetime: t,
                    censored_at: None,
                    left_limit: Some(SpacePoint::regular(tag, b)),
                    repr,
                };
            }
            x = self.reflect(x);
            events.push(Event {
                time: t,
                state: SpacePoint::regular(tag, x),
            });
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DiffusionDoc {
    #[serde(default)]
    tag: u32,
    space: StateSpaceDesc,
    #[serde(default = "default_drift")]
    drift: String,
    #[serde(default = "default_sigma")]
    sigma: String,
    #[serde(default)]
    killing: Vec<Endpoint>,
    dt: f64,
}

fn default_drift() -> String {
    "zero".into()
}

fn default_sigma() -> String {
    "unit".into()
}

impl TryFrom<DiffusionDoc> for IntervalDiffusion {
    type Error = Error;

    fn try_from(d: DiffusionDoc) -> Result<Self> {
        IntervalDiffusion::new(
            TaggedSpace::new(d.tag, d.space),
            d.drift.parse()?,
            d.sigma.parse()?,
            &d.killing,
            d.dt,
        )
    }
}

impl From<IntervalDiffusion> for DiffusionDoc {
    fn from(d: IntervalDiffusion) -> Self {
        let mut killing = Vec::new();
        if d.kill_lo {
            killing.push(Endpoint::Lo);
        }
        if d.kill_hi {
            killing.push(Endpoint::Hi);
        }
        DiffusionDoc {
            tag: d.space.tag,
            space: d.space.base,
            drift: d.drift.to_string(),
            sigma: d.sigma.to_string(),
            killing,
            dt: d.dt,
        }
    }
}

/// A killed Markov process description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    #[serde(rename = "chain")]
    FiniteChain(FiniteChain),
    #[serde(rename = "diffusion")]
    IntervalDiffusion(IntervalDiffusion),
}

impl ProcessSpec {
    pub fn space(&self) -> &TaggedSpace {
        match self {
            ProcessSpec::FiniteChain(c) => c.space(),
            ProcessSpec::IntervalDiffusion(d) => d.space(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.space().tag
    }

    /// The same process living under another tag.
    pub fn retagged(&self, tag: u32) -> ProcessSpec {
        let mut p = self.clone();
        match &mut p {
            ProcessSpec::FiniteChain(c) => c.space.tag = tag,
            ProcessSpec::IntervalDiffusion(d) => d.space.tag = tag,
        }
        p
    }

    pub fn as_chain(&self) -> Option<&FiniteChain> {
        match self {
            ProcessSpec::FiniteChain(c) => Some(c),
            ProcessSpec::IntervalDiffusion(_) => None,
        }
    }

    /// Samples from `start`, labelling every state with `tag` instead of the spec's own
    /// tag. Used to run tagged copies `{n} × X` without cloning the spec.
    pub fn sample_tagged(&self, tag: u32, start: &Value, horizon: f64, rng: &mut StreamRng) -> Result<Path> {
        if !(horizon > 0.0) {
            return Err(Error::domain(format!("horizon {horizon} must be positive")));
        }
        if !self.space().base.contains_value(start) {
            return Err(Error::domain(format!("start {start} lies outside the state space")));
        }
        match (self, start) {
            (ProcessSpec::FiniteChain(c), Value::Label(l)) => {
                let i = c.index_of(*l).expect("membership checked above");
                if horizon.is_infinite() && !c.terminates_from(i) {
                    return Err(Error::config(format!(
                        "chain started at {l} may live forever; a finite horizon is required"
                    )));
                }
                Ok(c.sample(tag, i, horizon, rng))
            }
            (ProcessSpec::IntervalDiffusion(d), Value::Real(x)) => {
                if horizon.is_infinite() && !(d.kill_lo || d.kill_hi) {
                    return Err(Error::config(
                        "diffusion without a killing boundary needs a finite horizon",
                    ));
                }
                Ok(d.sample(tag, *x, horizon, rng))
            }
            _ => unreachable!("membership implies a matching coordinate kind"),
        }
    }
}

/// Samples a path of `spec` from `start` up to `horizon` (which may be infinite when the
/// process dies almost surely).
pub fn sample_path(spec: &ProcessSpec, start: &SpacePoint, horizon: f64, rng: &mut StreamRng) -> Result<Path> {
    match start {
        SpacePoint::Cemetery => Ok(Path::dead()),
        SpacePoint::Regular { value, .. } => {
            if !spec.space().contains(start) {
                return Err(Error::domain(format!("start {start} lies outside {:?}", spec.space())));
            }
            spec.sample_tagged(spec.tag(), value, horizon, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn single_state(kill: f64) -> ProcessSpec {
        ProcessSpec::FiniteChain(FiniteChain::from_lists(1, &["x"], &[], &[("x", kill)]).unwrap())
    }

    fn two_state() -> ProcessSpec {
        ProcessSpec::FiniteChain(
            FiniteChain::from_lists(1, &["a", "b"], &[("a", "b", 1.0), ("b", "a", 2.0)], &[("b", 1.0)]).unwrap(),
        )
    }

    fn held(x: SpacePoint, zeta: f64) -> Path {
        Path::new(vec![Event { time: 0.0, state: x }], zeta, Representation::PiecewiseConstant).unwrap()
    }

    #[test]
    fn cemetery_start_gives_dead_path() {
        let mut g = RngStream::new(1, 0).generator();
        let p = sample_path(&single_state(1.0), &SpacePoint::Cemetery, 10.0, &mut g).unwrap();
        assert!(p.is_dead());
        assert_eq!(p.lifetime(), 0.0);
        assert_eq!(p.evaluate(0.0), SpacePoint::Cemetery);
    }

    #[test]
    fn normality() {
        let mut g = RngStream::new(1, 0).generator();
        let start = SpacePoint::regular(1, "a");
        let p = sample_path(&two_state(), &start, 10.0, &mut g).unwrap();
        assert_eq!(p.evaluate(0.0), start);
    }

    #[test]
    fn start_outside_space_is_domain_error() {
        let mut g = RngStream::new(1, 0).generator();
        let err = sample_path(&two_state(), &SpacePoint::regular(2, "a"), 10.0, &mut g).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn nonfinite_rates_are_rejected() {
        let err = FiniteChain::from_lists(1, &["a", "b"], &[("a", "b", f64::NAN)], &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = FiniteChain::from_lists(1, &["a"], &[], &[("a", f64::INFINITY)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn immortal_chain_needs_horizon() {
        let spec = ProcessSpec::FiniteChain(
            FiniteChain::from_lists(1, &["a", "b"], &[("a", "b", 1.0), ("b", "a", 1.0)], &[]).unwrap(),
        );
        let mut g = RngStream::new(1, 0).generator();
        assert!(sample_path(&spec, &SpacePoint::regular(1, "a"), f64::INFINITY, &mut g).is_err());
        let p = sample_path(&spec, &SpacePoint::regular(1, "a"), 5.0, &mut g).unwrap();
        assert_eq!(p.censored_at(), Some(5.0));
        assert_eq!(p.lifetime(), f64::INFINITY);
        assert!(p.exit_point().is_none());
    }

    #[test]
    fn absorbing_state_lives_forever_uncensored() {
        let spec = ProcessSpec::FiniteChain(FiniteChain::from_lists(1, &["a"], &[], &[]).unwrap());
        let mut g = RngStream::new(1, 0).generator();
        let p = sample_path(&spec, &SpacePoint::regular(1, "a"), f64::INFINITY, &mut g).unwrap();
        assert_eq!(p.lifetime(), f64::INFINITY);
        assert!(!p.is_censored());
    }

    #[test]
    fn exponential_lifetime_mean() {
        let spec = single_state(1.0);
        let n = 100_000;
        let start = SpacePoint::regular(1, "x");
        let mean: f64 = (0..n)
            .map(|i| {
                let mut g = RngStream::new(11, i).generator();
                sample_path(&spec, &start, f64::INFINITY, &mut g).unwrap().lifetime()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn two_state_mean_lifetime_matches_linear_solve() {
        // Mean absorption times solve (−Q_sub) m = 1:
        //   m_a = 1 + m_b,  3 m_b = 1 + 2 m_a  ⇒  m_a = 4, m_b = 3.
        let m_a = {
            // −Q_sub = [[1, −1], [−2, 3]], solved by Cramer's rule
            let (a, b, c, d): (f64, f64, f64, f64) = (1.0, -1.0, -2.0, 3.0);
            (d - b) / (a * d - b * c)
        };
        assert!((m_a - 4.0).abs() < 1e-12);
        let spec = two_state();
        let start = SpacePoint::regular(1, "a");
        let n = 100_000u64;
        let lifetimes: Vec<f64> = (0..n)
            .map(|i| {
                let mut g = RngStream::new(5, i).generator();
                sample_path(&spec, &start, f64::INFINITY, &mut g).unwrap().lifetime()
            })
            .collect();
        let mean = lifetimes.iter().sum::<f64>() / n as f64;
        let var = lifetimes.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - m_a).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn evaluate_boundary_convention() {
        let x = SpacePoint::regular(1, "x");
        let p = held(x, 2.0);
        assert_eq!(p.evaluate(1.9), x);
        assert_eq!(p.evaluate(2.0), SpacePoint::Cemetery);
        assert_eq!(Path::dead().evaluate(0.0), SpacePoint::Cemetery);
    }

    #[test]
    fn shift_basics() {
        let x = SpacePoint::regular(1, "x");
        let p = held(x, 3.0);
        assert_eq!(p.shift(0.0), p);
        assert_eq!(p.shift(1.0).lifetime(), 2.0);
        assert!(p.shift(3.5).is_dead());
        assert_eq!(Path::dead().shift(1.7), Path::dead());
    }

    #[test]
    fn exit_points() {
        assert_eq!(Path::dead().exit_point(), None);
        let b = SpacePoint::regular(1, "b");
        let p = Path::new(
            vec![
                Event { time: 0.0, state: SpacePoint::regular(1, "a") },
                Event { time: 0.5, state: b },
            ],
            1.2,
            Representation::PiecewiseConstant,
        )
        .unwrap();
        assert_eq!(p.exit_point(), Some(b));
    }

    #[test]
    fn diffusion_exit_point_is_the_snapped_boundary() {
        let spec = ProcessSpec::IntervalDiffusion(IntervalDiffusion::brownian(1, 0.0, 1.0, 1e-3).unwrap());
        for i in 0..200 {
            let mut g = RngStream::new(3, i).generator();
            let p = sample_path(&spec, &SpacePoint::regular(1, 0.9), f64::INFINITY, &mut g).unwrap();
            let exit = p.exit_point().unwrap();
            // the last recorded grid value is interior; the killing step crossed the boundary
            let last = p.events().last().unwrap().state.value().unwrap().as_real().unwrap();
            assert!(last > 0.0 && last < 1.0);
            let b = exit.value().unwrap().as_real().unwrap();
            assert!(b == 0.0 || b == 1.0);
            let t = p.lifetime();
            assert!(((t / 1e-3).round() * 1e-3 - t).abs() < 1e-12, "death on the grid");
        }
    }

    #[test]
    fn reflecting_endpoint_keeps_paths_inside() {
        let spec = ProcessSpec::IntervalDiffusion(
            IntervalDiffusion::new(
                TaggedSpace::new(1, StateSpaceDesc::interval(0.0, 1.0, [true, true]).unwrap()),
                Drift::Constant(-1.0),
                Sigma::Constant(1.0),
                &[Endpoint::Hi],
                1e-3,
            )
            .unwrap(),
        );
        let mut g = RngStream::new(9, 0).generator();
        let p = sample_path(&spec, &SpacePoint::regular(1, 0.1), 5.0, &mut g).unwrap();
        for e in p.events() {
            let x = e.state.value().unwrap().as_real().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn reproducible_paths() {
        let spec = two_state();
        let start = SpacePoint::regular(1, "a");
        let a = sample_path(&spec, &start, 50.0, &mut RngStream::new(42, 7).generator()).unwrap();
        let b = sample_path(&spec, &start, 50.0, &mut RngStream::new(42, 7).generator()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let spec = two_state();
        let s = serde_json::to_string(&spec).unwrap();
        let back: ProcessSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
        let d: ProcessSpec = serde_json::from_str(
            r#"{"kind":"diffusion","tag":1,"space":{"kind":"interval","lo":0,"hi":1},"drift":"ou(1.5,0.5)","sigma":"bm","killing":["lo","hi"],"dt":0.001}"#,
        )
        .unwrap();
        let again: ProcessSpec = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(d, again);
        assert!(serde_json::from_str::<ProcessSpec>(
            r#"{"kind":"diffusion","space":{"kind":"interval","lo":0,"hi":1},"drift":"exp(x)","dt":0.1}"#
        )
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_agrees_with_evaluate(seed in 0u64..500, r in 0.0f64..6.0, t in 0.0f64..6.0) {
                let spec = two_state();
                let mut g = RngStream::new(seed, 0).generator();
                let p = sample_path(&spec, &SpacePoint::regular(1, "a"), f64::INFINITY, &mut g).unwrap();
                let q = p.shift(r);
                prop_assert_eq!(q.lifetime(), (p.lifetime() - r).max(0.0));
                // compare on points where r + t is representable without rounding issues
                let rt = r + t;
                if rt - r == t {
                    prop_assert_eq!(q.evaluate(t), p.evaluate(rt));
                }
            }

            #[test]
            fn exit_point_is_shift_invariant_before_death(seed in 0u64..500, frac in 0.0f64..1.0) {
                let spec = two_state();
                let mut g = RngStream::new(seed, 1).generator();
                let p = sample_path(&spec, &SpacePoint::regular(1, "a"), f64::INFINITY, &mut g).unwrap();
                let r = frac * p.lifetime();
                if r < p.lifetime() {
                    prop_assert_eq!(p.shift(r).exit_point(), p.exit_point());
                }
            }
        }
    }
}
