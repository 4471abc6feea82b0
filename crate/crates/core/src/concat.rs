//! Pathwise concatenation of killed processes.
//!
//! Stage `n` runs until it dies, then the kernel attached to it draws the starting point
//! of stage `n + 1` from the dying path. Countable plans (alternating copies) generate
//! stages on demand. Every plan is truncated after `max_revivals` revivals or at total
//! time `horizon`.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Event, Path, ProcessSpec, Representation};
use crate::rng::StreamRng;
use crate::state_space::{SpacePoint, TaggedSpace, Value};
use crate::stats::CompensatedSum;
use crate::transfer::{sample_revival_tagged, KernelSpec};

/// When to stop sampling a composite path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TruncationDoc", into = "TruncationDoc")]
pub struct Truncation {
    pub max_revivals: usize,
    /// Total-time horizon; infinite means "until the composite dies".
    pub horizon: f64,
}

#[derive(Serialize, Deserialize)]
struct TruncationDoc {
    max_revivals: usize,
    #[serde(default)]
    horizon: Option<f64>,
}

impl TryFrom<TruncationDoc> for Truncation {
    type Error = Error;
    fn try_from(d: TruncationDoc) -> Result<Self> {
        Truncation::new(d.max_revivals, d.horizon.unwrap_or(f64::INFINITY))
    }
}

impl From<Truncation> for TruncationDoc {
    fn from(t: Truncation) -> Self {
        TruncationDoc {
            max_revivals: t.max_revivals,
            horizon: t.horizon.is_finite().then_some(t.horizon),
        }
    }
}

impl Truncation {
    pub fn new(max_revivals: usize, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::config(format!("horizon {horizon} must be positive")));
        }
        Ok(Truncation {
            max_revivals,
            horizon,
        })
    }
}

/// One stage of an explicit plan. The kernel moves the dying stage into the next one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub process: ProcessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
}

#[derive(Clone, Debug, PartialEq)]
enum StageRule {
    Explicit(Vec<Stage>),
    /// Stage `n` is `{n} × X^{(-1)^n}`: odd stages run `minus`, even stages `plus`.
    Alternating {
        minus: ProcessSpec,
        plus: ProcessSpec,
        kernel_minus: KernelSpec,
        kernel_plus: KernelSpec,
    },
}

/// A finite or countable sequence of processes chained by transfer kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatenationPlan {
    rule: StageRule,
    truncation: Truncation,
}

/// Stage `index` (1-based) of a plan, with the tag its states carry.
#[derive(Clone, Copy, Debug)]
pub struct StageRef<'a> {
    pub index: usize,
    pub tag: u32,
    pub process: &'a ProcessSpec,
    pub kernel: Option<&'a KernelSpec>,
}

impl StageRef<'_> {
    pub fn space(&self) -> TaggedSpace {
        self.process.space().retagged(self.tag)
    }

    pub fn contains(&self, p: &SpacePoint) -> bool {
        match p {
            SpacePoint::Regular { tag, value } => {
                *tag == self.tag && self.process.space().base.contains_value(value)
            }
            SpacePoint::Cemetery => false,
        }
    }
}

impl ConcatenationPlan {
    /// An explicit plan. Stage tags must be distinct; kernel `i` is checked against
    /// stage `i + 1` and relabelled with its tag.
    pub fn new(stages: Vec<Stage>, truncation: Truncation) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("a plan needs at least one stage"));
        }
        let mut tags = HashSet::new();
        for s in &stages {
            if !tags.insert(s.process.tag()) {
                return Err(Error::config(format!(
                    "stage tag {} is used twice; stage spaces must be disjoint",
                    s.process.tag()
                )));
            }
        }
        let mut bound = Vec::with_capacity(stages.len());
        for (i, s) in stages.iter().enumerate() {
            let kernel = match (&s.kernel, stages.get(i + 1)) {
                (None, _) => None,
                (Some(_), None) => {
                    return Err(Error::config("the last stage has a kernel but no stage to revive into"))
                }
                (Some(k), Some(next)) => Some(
                    k.bind(&s.process, &next.process.space().base)?
                        .retagged(next.process.tag()),
                ),
            };
            bound.push(Stage {
                process: s.process.clone(),
                kernel,
            });
        }
        Ok(ConcatenationPlan {
            rule: StageRule::Explicit(bound),
            truncation,
        })
    }

    /// A plan with a single stage: the base process itself.
    pub fn single(process: ProcessSpec, truncation: Truncation) -> Result<Self> {
        Self::new(vec![Stage { process, kernel: None }], truncation)
    }

    /// Alternating copies of `minus` and `plus`; `kernel_minus` sends a dying `minus`
    /// into `plus` and `kernel_plus` the other way.
    pub fn alternating(
        minus: ProcessSpec,
        plus: ProcessSpec,
        kernel_minus: &KernelSpec,
        kernel_plus: &KernelSpec,
        truncation: Truncation,
    ) -> Result<Self> {
        let kernel_minus = kernel_minus.bind(&minus, &plus.space().base)?;
        let kernel_plus = kernel_plus.bind(&plus, &minus.space().base)?;
        Ok(ConcatenationPlan {
            rule: StageRule::Alternating {
                minus,
                plus,
                kernel_minus,
                kernel_plus,
            },
            truncation,
        })
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn with_truncation(mut self, truncation: Truncation) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn is_alternating(&self) -> bool {
        matches!(self.rule, StageRule::Alternating { .. })
    }

    /// Number of stages, `None` for countable plans.
    pub fn stage_count(&self) -> Option<usize> {
        match &self.rule {
            StageRule::Explicit(s) => Some(s.len()),
            StageRule::Alternating { .. } => None,
        }
    }

    /// Stage `n` (1-based).
    pub fn stage(&self, n: usize) -> Option<StageRef<'_>> {
        if n == 0 {
            return None;
        }
        match &self.rule {
            StageRule::Explicit(stages) => stages.get(n - 1).map(|s| StageRef {
                index: n,
                tag: s.process.tag(),
                process: &s.process,
                kernel: s.kernel.as_ref(),
            }),
            StageRule::Alternating {
                minus,
                plus,
                kernel_minus,
                kernel_plus,
            } => {
                let (process, kernel) = if n % 2 == 1 {
                    (minus, kernel_minus)
                } else {
                    (plus, kernel_plus)
                };
                Some(StageRef {
                    index: n,
                    tag: n as u32,
                    process,
                    kernel: Some(kernel),
                })
            }
        }
    }

    /// `value` as a point of stage `n`.
    pub fn start_point(&self, n: usize, value: Value) -> Result<SpacePoint> {
        let stage = self
            .stage(n)
            .ok_or_else(|| Error::domain(format!("the plan has no stage {n}")))?;
        let p = SpacePoint::Regular {
            tag: stage.tag,
            value,
        };
        if !stage.contains(&p) {
            return Err(Error::domain(format!("{value} is not a state of stage {n}")));
        }
        Ok(p)
    }
}

/// JSON form of a plan: either explicit `stages` or an `alternating` pair.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PlanDoc {
    Explicit {
        stages: Vec<Stage>,
        truncation: Truncation,
    },
    Alternating {
        minus: ProcessSpec,
        plus: ProcessSpec,
        kernel_minus: KernelSpec,
        kernel_plus: KernelSpec,
        truncation: Truncation,
    },
}

impl Serialize for ConcatenationPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = match &self.rule {
            StageRule::Explicit(stages) => PlanDoc::Explicit {
                stages: stages.clone(),
                truncation: self.truncation,
            },
            StageRule::Alternating {
                minus,
                plus,
                kernel_minus,
                kernel_plus,
            } => PlanDoc::Alternating {
                minus: minus.clone(),
                plus: plus.clone(),
                kernel_minus: kernel_minus.clone(),
                kernel_plus: kernel_plus.clone(),
                truncation: self.truncation,
            },
        };
        doc.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConcatenationPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let plan = match PlanDoc::deserialize(d)? {
            PlanDoc::Explicit { stages, truncation } => ConcatenationPlan::new(stages, truncation),
            PlanDoc::Alternating {
                minus,
                plus,
                kernel_minus,
                kernel_plus,
                truncation,
            } => ConcatenationPlan::alternating(minus, plus, &kernel_minus, &kernel_plus, truncation),
        };
        plan.map_err(serde::de::Error::custom)
    }
}

/// Why sampling of a composite stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The last stage died with no kernel to revive it.
    Died,
    /// A stage with infinite lifetime.
    LivesForever,
    /// Total time reached the horizon.
    Censored,
    /// The revival budget was used up while a revival was still due.
    RevivalCap,
    /// The dying path had no exit point for the kernel; the composite stays dead.
    NoExitPoint,
    /// Cut at a revival time by [`kill_at_revival`].
    Killed,
}

/// The segment of stage `stage`, with the point stage `stage + 1` starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub stage: usize,
    pub path: Path,
    pub revival: Option<SpacePoint>,
}

/// A sampled composite path `(ω^1, ω^2, …)`.
///
/// `segments[j]` belongs to stage `j + 1`. Stages before the starting stage hold the
/// dead path; the one just before it records the starting point as its revival point.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatPath {
    segments: Vec<Segment>,
    cumulative: Vec<f64>,
    censor_time: Option<f64>,
    stop: StopReason,
    start: usize,
}

fn partial_sums(segments: &[Segment]) -> Vec<f64> {
    let mut acc = CompensatedSum::new();
    segments
        .iter()
        .map(|s| {
            acc.add(s.path.lifetime());
            acc.value()
        })
        .collect()
}

impl ConcatPath {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// `ζ^(1) ≤ ζ^(2) ≤ …`, one entry per segment.
    pub fn cumulative_lifetimes(&self) -> &[f64] {
        &self.cumulative
    }

    /// `Σ ζ^n`; infinite when the last segment lives forever or is censored.
    pub fn lifetime(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn censor_time(&self) -> Option<f64> {
        self.censor_time
    }

    pub fn is_censored(&self) -> bool {
        self.censor_time.is_some()
    }

    pub fn stop_reason(&self) -> StopReason {
        self.stop
    }

    /// The stage the composite started in.
    pub fn start_stage(&self) -> usize {
        self.start
    }

    /// Revivals performed after the start.
    pub fn revivals(&self) -> usize {
        self.segments[self.start - 1..]
            .iter()
            .filter(|s| s.revival.is_some())
            .count()
    }

    /// Start time of segment `j` (0-based), i.e. `ζ^(j)`.
    pub fn offset(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.cumulative[j - 1]
        }
    }

    /// The composite as a single path; `project` erases tags.
    pub fn flatten(&self, project: bool) -> Path {
        let mut events: Vec<Event> = Vec::new();
        let mut repr = Representation::PiecewiseConstant;
        for (j, seg) in self.segments.iter().enumerate() {
            if let Representation::Grid { .. } = seg.path.representation() {
                repr = seg.path.representation();
            }
            let offset = self.offset(j);
            for e in seg.path.events() {
                let time = offset + e.time;
                let state = if project { e.state.untagged() } else { e.state };
                if self.censor_time.is_some_and(|c| time >= c) {
                    break;
                }
                match events.last_mut() {
                    Some(last) if last.time >= time => last.state = state,
                    Some(last) if last.state == state => {}
                    _ => events.push(Event { time, state }),
                }
            }
        }
        let lifetime = self.lifetime();
        if lifetime.is_finite() {
            events.retain(|e| e.time < lifetime);
        }
        let left_limit = self
            .segments
            .last()
            .filter(|_| self.censor_time.is_none())
            .and_then(|s| s.path.left_limit())
            .map(|p| if project { p.untagged() } else { p });
        Path::from_parts(events, lifetime, self.censor_time, left_limit, repr)
    }

    /// Dumps `(time, tag, state)` rows; the cemetery is written with an empty tag.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "tag", "state"])?;
        for (j, seg) in self.segments.iter().enumerate() {
            let offset = self.offset(j);
            for e in seg.path.events() {
                if let SpacePoint::Regular { tag, value } = e.state {
                    w.write_record([
                        (offset + e.time).to_string(),
                        tag.to_string(),
                        value.to_string(),
                    ])?;
                }
            }
        }
        match self.censor_time {
            Some(c) => w.write_record([c.to_string(), String::new(), "censored".into()])?,
            None if self.lifetime().is_finite() => {
                w.write_record([self.lifetime().to_string(), String::new(), "Δ".into()])?
            }
            None => {}
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples a composite path started at `start` in stage `stage`.
pub fn sample_concatenated(
    plan: &ConcatenationPlan,
    stage: usize,
    start: &SpacePoint,
    rng: &mut StreamRng,
) -> Result<ConcatPath> {
    let first = plan
        .stage(stage)
        .ok_or_else(|| Error::domain(format!("the plan has no stage {stage}")))?;
    if !first.contains(start) {
        return Err(Error::domain(format!("start {start} lies outside stage {stage}")));
    }
    let Truncation {
        max_revivals,
        horizon,
    } = plan.truncation();

    let mut segments: Vec<Segment> = (1..stage)
        .map(|n| Segment {
            stage: n,
            path: Path::dead(),
            revival: (n + 1 == stage).then_some(*start),
        })
        .collect();
    let mut elapsed = CompensatedSum::new();
    let mut current = *start;
    let mut n = stage;
    let mut revivals = 0usize;
    let mut censor_time = None;

    let stop = loop {
        let st = plan.stage(n).expect("stage existence checked before reviving into it");
        let remaining = horizon - elapsed.value();
        if !(remaining > 0.0) {
            segments.push(Segment {
                stage: n,
                path: Path::dead().censor(0.0),
                revival: None,
            });
            censor_time = Some(elapsed.value());
            break StopReason::Censored;
        }
        let value = current.value().expect("revival points are regular");
        let path = st.process.sample_tagged(st.tag, &value, remaining, rng)?;
        if let Some(c) = path.censored_at() {
            censor_time = Some(elapsed.value() + c);
            segments.push(Segment {
                stage: n,
                path,
                revival: None,
            });
            break StopReason::Censored;
        }
        if path.lifetime().is_infinite() {
            segments.push(Segment {
                stage: n,
                path,
                revival: None,
            });
            break StopReason::LivesForever;
        }
        elapsed.add(path.lifetime());
        let Some(kernel) = st.kernel else {
            segments.push(Segment {
                stage: n,
                path,
                revival: None,
            });
            break StopReason::Died;
        };
        if revivals == max_revivals {
            segments.push(Segment {
                stage: n,
                path,
                revival: None,
            });
            break StopReason::RevivalCap;
        }
        let next = plan.stage(n + 1).expect("a stage with a kernel has a successor");
        match sample_revival_tagged(kernel, &path, next.tag, rng) {
            Ok(p) => {
                if !next.contains(&p) {
                    return Err(Error::config(format!(
                        "revival point {p} lies outside stage {}",
                        n + 1
                    )));
                }
                segments.push(Segment {
                    stage: n,
                    path,
                    revival: Some(p),
                });
                current = p;
                n += 1;
                revivals += 1;
            }
            Err(Error::RevivalUndefined(_)) => {
                segments.push(Segment {
                    stage: n,
                    path,
                    revival: None,
                });
                break StopReason::NoExitPoint;
            }
            Err(e) => return Err(e),
        }
    };

    let cumulative = partial_sums(&segments);
    Ok(ConcatPath {
        segments,
        cumulative,
        censor_time,
        stop,
        start: stage,
    })
}

/// `X_t` of the composite: segment `n` on `[ζ^(n−1), ζ^(n))`, the cemetery after all
/// segments.
pub fn evaluate_concat(cp: &ConcatPath, t: f64) -> Result<SpacePoint> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("time {t} must be nonnegative")));
    }
    if let Some(c) = cp.censor_time {
        if t >= c {
            return Err(Error::UndefinedRegion { t, censor: c });
        }
    }
    let j = cp.cumulative.partition_point(|&c| c <= t);
    let Some(seg) = cp.segments.get(j) else {
        return Ok(SpacePoint::Cemetery);
    };
    let local = t - cp.offset(j);
    Ok(match seg.path.evaluate(local) {
        // rounding put `local` at the segment's end; it is still alive there
        SpacePoint::Cemetery => seg
            .path
            .events()
            .last()
            .map(|e| e.state)
            .unwrap_or(SpacePoint::Cemetery),
        p => p,
    })
}

/// `R^n`: `ζ^(n)` when the composite entered stage `n + 1`, infinite otherwise.
pub fn revival_time(cp: &ConcatPath, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    match cp.segments.get(n - 1) {
        Some(seg) if seg.revival.is_some() => cp.cumulative[n - 1],
        _ => f64::INFINITY,
    }
}

/// `X^{R,n}`: the composite killed at its `n`-th revival time.
pub fn kill_at_revival(cp: &ConcatPath, n: usize) -> ConcatPath {
    if cp.segments.len() <= n {
        return cp.clone();
    }
    let mut segments = cp.segments[..n].to_vec();
    if let Some(last) = segments.last_mut() {
        last.revival = None;
    }
    let cumulative = cp.cumulative[..n].to_vec();
    ConcatPath {
        start: cp.start.min(n.max(1)),
        segments,
        cumulative,
        censor_time: None,
        stop: StopReason::Killed,
    }
}

/// `Θ_r` of the composite: earlier segments become dead paths.
pub fn shift_concat(cp: &ConcatPath, r: f64) -> ConcatPath {
    if r == 0.0 {
        return cp.clone();
    }
    let j = cp.cumulative.partition_point(|&c| c <= r);
    let mut segments: Vec<Segment> = cp
        .segments
        .iter()
        .map(|s| Segment {
            stage: s.stage,
            path: Path::dead(),
            revival: None,
        })
        .collect();
    if j < cp.segments.len() {
        let shifted = cp.segments[j].path.shift(r - cp.offset(j));
        if j > 0 {
            segments[j - 1].revival = shifted.events().first().map(|e| e.state);
        }
        segments[j].path = shifted;
        segments[j].revival = cp.segments[j].revival;
        segments[j + 1..].clone_from_slice(&cp.segments[j + 1..]);
    }
    let cumulative = partial_sums(&segments);
    ConcatPath {
        segments,
        cumulative,
        censor_time: cp.censor_time.map(|c| (c - r).max(0.0)),
        stop: if j < cp.segments.len() { cp.stop } else { StopReason::Died },
        start: (j + 1).clamp(cp.start, cp.segments.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::FiniteChain;
    use crate::rng::RngStream;
    use crate::stats::mean_stderr;

    fn single(tag: u32, label: &str, kill: f64) -> ProcessSpec {
        ProcessSpec::FiniteChain(FiniteChain::from_lists(tag, &[label], &[], &[(label, kill)]).unwrap())
    }

    fn two_stage_dirac(max_revivals: usize) -> ConcatenationPlan {
        ConcatenationPlan::new(
            vec![
                Stage {
                    process: single(1, "x", 1.0),
                    kernel: Some(KernelSpec::dirac(SpacePoint::regular(2, "y")).unwrap()),
                },
                Stage {
                    process: single(2, "y", 2.0),
                    kernel: None,
                },
            ],
            Truncation::new(max_revivals, f64::INFINITY).unwrap(),
        )
        .unwrap()
    }

    fn flip_flop() -> ConcatenationPlan {
        let minus = ProcessSpec::FiniteChain(
            FiniteChain::from_lists(0, &["s", "l"], &[("s", "l", 1.0)], &[("l", 1.0)]).unwrap(),
        );
        let plus = ProcessSpec::FiniteChain(
            FiniteChain::from_lists(0, &["s", "r"], &[("s", "r", 2.0)], &[("r", 1.0)]).unwrap(),
        );
        let km = KernelSpec::exit_table(0, &[("l", &[("s", 0.4), ("r", 0.6)])]).unwrap();
        let kp = KernelSpec::exit_table(0, &[("r", &[("s", 1.0)])]).unwrap();
        ConcatenationPlan::alternating(minus, plus, &km, &kp, Truncation::new(20, 50.0).unwrap()).unwrap()
    }

    fn sample(plan: &ConcatenationPlan, stage: usize, value: &str, id: u64) -> ConcatPath {
        let start = plan.start_point(stage, Value::label(value)).unwrap();
        sample_concatenated(plan, stage, &start, &mut RngStream::new(5, id).generator()).unwrap()
    }

    #[test]
    fn no_revivals_reduces_to_the_base_process() {
        let plan = two_stage_dirac(0);
        let cp = sample(&plan, 1, "x", 0);
        assert_eq!(cp.segments().len(), 1);
        assert_eq!(cp.stop_reason(), StopReason::RevivalCap);
        let base = plan
            .stage(1)
            .unwrap()
            .process
            .sample_tagged(1, &Value::label("x"), f64::INFINITY, &mut RngStream::new(5, 0).generator())
            .unwrap();
        assert_eq!(cp.segments()[0].path, base);
    }

    #[test]
    fn two_stage_mean_lifetime() {
        let plan = two_stage_dirac(5);
        let lifetimes: Vec<f64> = (0..100_000).map(|i| sample(&plan, 1, "x", i).lifetime()).collect();
        let (m, se) = mean_stderr(&lifetimes);
        assert!((m - 1.5).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn evaluation_conventions() {
        let plan = two_stage_dirac(5);
        let cp = sample(&plan, 1, "x", 1);
        assert_eq!(evaluate_concat(&cp, 0.0).unwrap(), SpacePoint::regular(1, "x"));
        let r1 = revival_time(&cp, 1);
        assert_eq!(r1, cp.segments()[0].path.lifetime());
        assert_eq!(evaluate_concat(&cp, r1).unwrap(), SpacePoint::regular(2, "y"));
        assert_eq!(evaluate_concat(&cp, cp.lifetime()).unwrap(), SpacePoint::Cemetery);
        assert_eq!(revival_time(&cp, 0), 0.0);
        assert_eq!(revival_time(&cp, 2), f64::INFINITY);
        assert!(evaluate_concat(&cp, -1.0).is_err());
    }

    #[test]
    fn later_start_has_a_dead_prefix() {
        let plan = two_stage_dirac(5);
        let cp = sample(&plan, 2, "y", 2);
        assert!(cp.segments()[0].path.is_dead());
        assert_eq!(cp.cumulative_lifetimes()[0], 0.0);
        assert_eq!(revival_time(&cp, 1), 0.0);
        assert_eq!(evaluate_concat(&cp, 0.0).unwrap(), SpacePoint::regular(2, "y"));
        assert_eq!(cp.revivals(), 0);
    }

    #[test]
    fn revival_times_are_partial_sums() {
        let plan = flip_flop();
        for i in 0..200 {
            let cp = sample(&plan, 1, "s", i);
            let mut acc = CompensatedSum::new();
            for (j, seg) in cp.segments().iter().enumerate() {
                acc.add(seg.path.lifetime());
                assert_eq!(cp.cumulative_lifetimes()[j], acc.value());
                if let Some(p) = seg.revival {
                    assert_eq!(revival_time(&cp, j + 1), cp.cumulative_lifetimes()[j]);
                    if cp.censor_time().is_none_or(|c| revival_time(&cp, j + 1) < c) {
                        assert_eq!(evaluate_concat(&cp, revival_time(&cp, j + 1)).unwrap(), p);
                    }
                    assert!(plan.stage(j + 2).unwrap().contains(&p));
                }
            }
        }
    }

    #[test]
    fn stage_containment() {
        let plan = flip_flop();
        for i in 0..200 {
            let cp = sample(&plan, 1, "s", i);
            for seg in cp.segments() {
                let st = plan.stage(seg.stage).unwrap();
                assert!(seg.path.events().iter().all(|e| st.contains(&e.state)));
            }
        }
    }

    #[test]
    fn alternating_tags_and_revival_distribution() {
        let plan = flip_flop();
        assert_eq!(plan.stage(1).unwrap().space().tag, 1);
        assert_eq!(plan.stage(2).unwrap().space().tag, 2);
        let n = 20_000u64;
        let hits = (0..n)
            .filter(|&i| {
                let cp = sample(&plan, 1, "s", i);
                cp.segments()[0].revival == Some(SpacePoint::regular(2, "s"))
            })
            .count() as f64;
        let sd = (n as f64 * 0.4 * 0.6).sqrt();
        assert!((hits - 0.4 * n as f64).abs() < 3.0 * sd, "{hits}");
    }

    #[test]
    fn truncation_only_appends() {
        let short = flip_flop().with_truncation(Truncation::new(2, 50.0).unwrap());
        let long = flip_flop().with_truncation(Truncation::new(3, 50.0).unwrap());
        for i in 0..100 {
            let a = sample(&short, 1, "s", i);
            let b = sample(&long, 1, "s", i);
            let k = a.segments().len();
            for j in 0..k - 1 {
                assert_eq!(a.segments()[j], b.segments()[j]);
            }
            assert_eq!(a.segments()[k - 1].path, b.segments()[k - 1].path);
        }
    }

    #[test]
    fn kill_at_revival_agrees_before_the_cut() {
        let plan = flip_flop();
        for i in 0..1_000 {
            let cp = sample(&plan, 1, "s", i);
            let killed = kill_at_revival(&cp, 1);
            assert_eq!(killed.lifetime(), cp.segments()[0].path.lifetime());
            let cut = revival_time(&cp, 2);
            let k2 = kill_at_revival(&cp, 2);
            for t in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0] {
                if t < cut && cp.censor_time().is_none_or(|c| t < c) {
                    assert_eq!(evaluate_concat(&k2, t).unwrap(), evaluate_concat(&cp, t).unwrap());
                }
            }
            let top = cp.segments().len();
            if cp.stop_reason() != StopReason::Censored {
                assert_eq!(kill_at_revival(&cp, top), cp);
            }
        }
    }

    #[test]
    fn shift_matches_evaluation_and_lifetime() {
        let plan = flip_flop();
        for i in 0..1_000 {
            let cp = sample(&plan, 1, "s", i);
            for r in [0.0, 0.3, 1.0, 2.5, 60.0] {
                let s = shift_concat(&cp, r);
                if cp.lifetime().is_finite() {
                    let expect = (cp.lifetime() - r).max(0.0);
                    assert!((s.lifetime() - expect).abs() <= 1e-9 * cp.lifetime().max(1.0));
                }
                for t in [0.0, 0.2, 0.7, 1.9] {
                    if cp.censor_time().is_none_or(|c| r + t < c) {
                        assert_eq!(
                            evaluate_concat(&s, t).unwrap(),
                            evaluate_concat(&cp, r + t).unwrap(),
                            "path {i} r {r} t {t}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shift_past_the_end_is_dead() {
        let plan = two_stage_dirac(5);
        let cp = sample(&plan, 1, "x", 3);
        let s = shift_concat(&cp, cp.lifetime() + 1.0);
        assert_eq!(s.lifetime(), 0.0);
        assert!(s.segments().iter().all(|seg| seg.path.is_dead()));
    }

    #[test]
    fn censoring_marks_the_undefined_region() {
        let plan = flip_flop().with_truncation(Truncation::new(1_000, 0.5).unwrap());
        let cp = (0..100)
            .map(|i| sample(&plan, 1, "s", i))
            .find(|cp| cp.is_censored())
            .unwrap();
        assert!(cp.censor_time().unwrap() <= 0.5 + 1e-12);
        assert!(matches!(evaluate_concat(&cp, 0.5), Err(Error::UndefinedRegion { .. })));
        assert!(cp.lifetime().is_infinite());
    }

    #[test]
    fn plans_reject_duplicate_tags_and_dangling_kernels() {
        let dup = ConcatenationPlan::new(
            vec![
                Stage {
                    process: single(1, "x", 1.0),
                    kernel: None,
                },
                Stage {
                    process: single(1, "y", 1.0),
                    kernel: None,
                },
            ],
            Truncation::new(1, f64::INFINITY).unwrap(),
        );
        assert!(matches!(dup, Err(Error::Config(_))));
        let dangling = ConcatenationPlan::new(
            vec![Stage {
                process: single(1, "x", 1.0),
                kernel: Some(KernelSpec::dirac(SpacePoint::regular(2, "y")).unwrap()),
            }],
            Truncation::new(1, f64::INFINITY).unwrap(),
        );
        assert!(matches!(dangling, Err(Error::Config(_))));
        let plan = two_stage_dirac(1);
        assert!(matches!(
            sample_concatenated(&plan, 1, &SpacePoint::regular(1, "zz"), &mut RngStream::new(0, 0).generator()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = flip_flop();
        let text = serde_json::to_string(&plan).unwrap();
        let back: ConcatenationPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        let plan = two_stage_dirac(3);
        let back: ConcatenationPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn flatten_projects_tags_away() {
        let plan = flip_flop();
        for i in 0..50 {
            let cp = sample(&plan, 1, "s", i);
            let flat = cp.flatten(true);
            assert!(flat.events().iter().all(|e| e.state.tag() == Some(0)));
            for t in [0.0, 0.4, 1.3] {
                if cp.censor_time().is_none_or(|c| t < c) {
                    assert_eq!(flat.evaluate(t), evaluate_concat(&cp, t).unwrap().untagged());
                }
            }
        }
    }
}
