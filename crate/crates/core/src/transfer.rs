//! Transfer kernels: where a dying stage is revived.
//!
//! All shipped kernels factor through the exit point `X_{ζ−}` of the dying path, which
//! is what makes them invariant under shifts before death. Kernels that look at more of
//! the path can implement [`TransferKernel`] directly.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{Path, ProcessSpec};
use crate::rng::StreamRng;
use crate::state_space::{SpacePoint, StateSpaceDesc, Value};

const ROW_SUM_TOL: f64 = 1e-12;

/// A revival distribution over target coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Row<'a> {
    Table(&'a [(Value, f64)]),
    Owned(Vec<(Value, f64)>),
    Point(Value),
}

impl Row<'_> {
    pub fn to_vec(&self) -> Vec<(Value, f64)> {
        match self {
            Row::Table(r) => r.to_vec(),
            Row::Owned(r) => r.clone(),
            Row::Point(v) => vec![(*v, 1.0)],
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Value {
        let entries = match self {
            Row::Point(v) => return *v,
            Row::Table(r) => *r,
            Row::Owned(r) => r.as_slice(),
        };
        let mut u = rng.uniform();
        for (v, w) in entries {
            if u < *w {
                return *v;
            }
            u -= w;
        }
        // rounding left u just above the accumulated mass
        entries.iter().rev().find(|(_, w)| *w > 0.0).map(|(v, _)| *v).unwrap()
    }

    /// `Σ f(y) k(x, {y})`, summed relative to the last entry so that constant `f`
    /// gives exactly that constant.
    pub fn expectation(&self, f: impl Fn(&Value) -> f64) -> f64 {
        let entries = match self {
            Row::Point(v) => return f(v),
            Row::Table(r) => *r,
            Row::Owned(r) => r.as_slice(),
        };
        let (last, rest) = entries.split_last().expect("rows are non-empty");
        let anchor = f(&last.0);
        anchor + rest.iter().map(|(v, w)| w * (f(v) - anchor)).sum::<f64>()
    }
}

/// Probability kernel from a dying path to the next stage's space.
pub trait TransferKernel: Sync {
    /// Revival distribution for `dying`, over untagged coordinates of the target space.
    fn revival_row(&self, dying: &Path) -> Result<Row<'_>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitRow {
    pub source: Value,
    pub targets: Vec<(Value, f64)>,
}

/// Exit-point kernels: a table `x ↦ k(x, ·)`, a point mass, or revival at the exit
/// coordinate itself in another space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelDoc", into = "KernelDoc")]
pub enum KernelSpec {
    ExitTable { target_tag: u32, rows: Vec<ExitRow> },
    Dirac { target: SpacePoint },
    ExitIdentity { retag: u32 },
}

impl KernelSpec {
    pub fn exit_table(target_tag: u32, rows: &[(&str, &[(&str, f64)])]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|(src, targets)| ExitRow {
                source: Value::label(src),
                targets: targets.iter().map(|(t, w)| (Value::label(t), *w)).collect(),
            })
            .collect();
        let k = KernelSpec::ExitTable { target_tag, rows }.canonical();
        k.validate()?;
        Ok(k)
    }

    /// Rows and targets in a fixed order, so sampling does not depend on how the
    /// kernel was written down.
    fn canonical(self) -> Self {
        match self {
            KernelSpec::ExitTable { target_tag, mut rows } => {
                rows.sort_by(|a, b| value_order(&a.source, &b.source));
                for r in &mut rows {
                    r.targets.sort_by(|a, b| value_order(&a.0, &b.0));
                }
                KernelSpec::ExitTable { target_tag, rows }
            }
            k => k,
        }
    }

    pub fn dirac(target: SpacePoint) -> Result<Self> {
        let k = KernelSpec::Dirac { target };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::ExitTable { rows, .. } => {
                if rows.is_empty() {
                    return Err(Error::config("exit table has no rows"));
                }
                for (i, row) in rows.iter().enumerate() {
                    if rows[..i].iter().any(|r| r.source == row.source) {
                        return Err(Error::config(format!("duplicate row for exit point {}", row.source)));
                    }
                    if row.targets.is_empty() {
                        return Err(Error::config(format!("row {} is empty", row.source)));
                    }
                    if row.targets.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
                        return Err(Error::config(format!("row {} has a negative weight", row.source)));
                    }
                    let sum: f64 = row.targets.iter().map(|(_, w)| w).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::config(format!("row {} sums to {sum}, not 1", row.source)));
                    }
                }
                Ok(())
            }
            KernelSpec::Dirac { target } => match target {
                SpacePoint::Regular { .. } => Ok(()),
                SpacePoint::Cemetery => Err(Error::config("a Dirac kernel must target a regular point")),
            },
            KernelSpec::ExitIdentity { .. } => Ok(()),
        }
    }

    /// Tag carried by every revival point this kernel produces.
    pub fn target_tag(&self) -> u32 {
        match self {
            KernelSpec::ExitTable { target_tag, .. } => *target_tag,
            KernelSpec::Dirac { target } => target.tag().unwrap_or(0),
            KernelSpec::ExitIdentity { retag } => *retag,
        }
    }

    /// Same kernel, emitting points with `tag` (the `δ_{n+1} ⊗ K` construction).
    pub fn retagged(&self, tag: u32) -> KernelSpec {
        match self {
            KernelSpec::ExitTable { rows, .. } => KernelSpec::ExitTable {
                target_tag: tag,
                rows: rows.clone(),
            },
            KernelSpec::Dirac { target } => KernelSpec::Dirac {
                target: target.with_tag(tag),
            },
            KernelSpec::ExitIdentity { .. } => KernelSpec::ExitIdentity { retag: tag },
        }
    }

    /// Row for an exit coordinate.
    pub fn row_for(&self, exit: &Value) -> Result<Row<'_>> {
        match self {
            KernelSpec::ExitTable { rows, .. } => rows
                .iter()
                .find(|r| r.source == *exit)
                .map(|r| Row::Table(&r.targets))
                .ok_or_else(|| Error::config(format!("no kernel row for exit point {exit}"))),
            KernelSpec::Dirac { target } => Ok(Row::Point(target.value().expect("validated regular"))),
            KernelSpec::ExitIdentity { .. } => Ok(Row::Point(*exit)),
        }
    }

    /// Resolves JSON-typed coordinates against the source and target spaces and checks
    /// that every exit point `source` can produce has a row landing inside `target`.
    pub fn bind(&self, source: &ProcessSpec, target: &StateSpaceDesc) -> Result<KernelSpec> {
        let src_base = &source.space().base;
        let bound = match self {
            KernelSpec::ExitTable { target_tag, rows } => {
                let rows = rows
                    .iter()
                    .map(|r| {
                        Ok(ExitRow {
                            source: coerce(&r.source, src_base)?,
                            targets: r
                                .targets
                                .iter()
                                .map(|(v, w)| Ok((coerce(v, target)?, *w)))
                                .collect::<Result<_>>()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::ExitTable {
                    target_tag: *target_tag,
                    rows,
                }
            }
            KernelSpec::Dirac { target: p } => {
                let value = coerce(&p.value().expect("validated regular"), target)?;
                KernelSpec::Dirac {
                    target: SpacePoint::Regular {
                        tag: p.tag().unwrap_or(0),
                        value,
                    },
                }
            }
            KernelSpec::ExitIdentity { retag } => KernelSpec::ExitIdentity { retag: *retag },
        }
        .canonical();
        bound.validate()?;
        for exit in exit_values(source) {
            let row = bound.row_for(&exit)?;
            for (v, w) in row.to_vec() {
                if w > 0.0 && !target.contains_value(&v) {
                    return Err(Error::config(format!(
                        "kernel sends exit point {exit} to {v}, outside the target space"
                    )));
                }
            }
        }
        Ok(bound)
    }
}

/// Exit coordinates a process can die from: killing states of a chain, killing
/// endpoints of a diffusion.
pub fn exit_values(spec: &ProcessSpec) -> Vec<Value> {
    match spec {
        ProcessSpec::FiniteChain(c) => c
            .labels()
            .iter()
            .zip(c.kill())
            .filter(|(_, k)| **k > 0.0)
            .map(|(l, _)| Value::Label(*l))
            .collect(),
        ProcessSpec::IntervalDiffusion(d) => d.killing_points().into_iter().map(Value::Real).collect(),
    }
}

fn value_order(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Label(x), Value::Label(y)) => x.as_str().cmp(y.as_str()),
        (Value::Real(x), Value::Real(y)) => x.total_cmp(y),
        (Value::Label(_), Value::Real(_)) => Ordering::Less,
        (Value::Real(_), Value::Label(_)) => Ordering::Greater,
    }
}

fn coerce(v: &Value, space: &StateSpaceDesc) -> Result<Value> {
    match (v, space) {
        (Value::Label(l), StateSpaceDesc::RealInterval { .. }) => l
            .as_str()
            .parse::<f64>()
            .map(Value::Real)
            .map_err(|_| Error::config(format!("{l} is not a coordinate of an interval space"))),
        (Value::Real(x), StateSpaceDesc::FiniteLabels { .. }) => {
            Err(Error::config(format!("{x} is not a label")))
        }
        _ => Ok(*v),
    }
}

impl TransferKernel for KernelSpec {
    fn revival_row(&self, dying: &Path) -> Result<Row<'_>> {
        if let KernelSpec::Dirac { target } = self {
            return Ok(Row::Point(target.value().expect("validated regular")));
        }
        let exit = dying
            .exit_point()
            .ok_or_else(|| Error::RevivalUndefined("the dying path has no exit point".into()))?;
        self.row_for(&exit.value().expect("exit points are regular"))
    }
}

/// Draws a revival point tagged with the kernel's own target tag.
pub fn sample_revival(kernel: &KernelSpec, dying: &Path, rng: &mut StreamRng) -> Result<SpacePoint> {
    sample_revival_tagged(kernel, dying, kernel.target_tag(), rng)
}

pub fn sample_revival_tagged(
    kernel: &dyn TransferKernel,
    dying: &Path,
    tag: u32,
    rng: &mut StreamRng,
) -> Result<SpacePoint> {
    let row = kernel.revival_row(dying)?;
    Ok(SpacePoint::Regular {
        tag,
        value: row.sample(rng),
    })
}

/// `K f` at an exit point: `Σ f(y) k(exit, {y})`.
pub fn kernel_expectation(kernel: &KernelSpec, exit: &SpacePoint, f: impl Fn(&SpacePoint) -> f64) -> Result<f64> {
    let value = exit
        .value()
        .ok_or_else(|| Error::RevivalUndefined("the cemetery has no kernel row".into()))?;
    let tag = kernel.target_tag();
    let row = kernel.row_for(&value)?;
    Ok(row.expectation(|v| f(&SpacePoint::Regular { tag, value: *v })))
}

/// Checks, pathwise and exactly, that the revival distribution does not change when a
/// path is shifted by any `r` in `r_grid` with `r < ζ`.
pub fn check_shift_invariance(kernel: &dyn TransferKernel, paths: &[Path], r_grid: &[f64]) -> bool {
    paths
        .iter()
        .filter(|p| p.lifetime().is_finite() && !p.is_censored())
        .all(|p| {
            let reference = kernel.revival_row(p).ok().map(|r| r.to_vec());
            r_grid
                .iter()
                .filter(|&&r| r < p.lifetime())
                .all(|&r| kernel.revival_row(&p.shift(r)).ok().map(|r| r.to_vec()) == reference)
        })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KernelDoc {
    ExitTable {
        #[serde(default)]
        tag: u32,
        rows: BTreeMap<String, BTreeMap<String, f64>>,
    },
    Dirac {
        #[serde(default)]
        tag: u32,
        target: Value,
    },
    ExitIdentity {
        #[serde(default)]
        retag: u32,
    },
}

impl TryFrom<KernelDoc> for KernelSpec {
    type Error = Error;

    fn try_from(doc: KernelDoc) -> Result<Self> {
        let k = match doc {
            KernelDoc::ExitTable { tag, rows } => KernelSpec::ExitTable {
                target_tag: tag,
                rows: rows
                    .into_iter()
                    .map(|(src, targets)| ExitRow {
                        source: Value::label(&src),
                        targets: targets.into_iter().map(|(t, w)| (Value::label(&t), w)).collect(),
                    })
                    .collect(),
            },
            KernelDoc::Dirac { tag, target } => KernelSpec::Dirac {
                target: SpacePoint::Regular { tag, value: target },
            },
            KernelDoc::ExitIdentity { retag } => KernelSpec::ExitIdentity { retag },
        }
        .canonical();
        k.validate()?;
        Ok(k)
    }
}

impl From<KernelSpec> for KernelDoc {
    fn from(k: KernelSpec) -> Self {
        match k {
            KernelSpec::ExitTable { target_tag, rows } => KernelDoc::ExitTable {
                tag: target_tag,
                rows: rows
                    .into_iter()
                    .map(|r| {
                        (
                            r.source.to_string(),
                            r.targets.into_iter().map(|(v, w)| (v.to_string(), w)).collect(),
                        )
                    })
                    .collect(),
            },
            KernelSpec::Dirac { target } => KernelDoc::Dirac {
                tag: target.tag().unwrap_or(0),
                target: target.value().unwrap_or(Value::Real(f64::NAN)),
            },
            KernelSpec::ExitIdentity { retag } => KernelDoc::ExitIdentity { retag },
        }
    }
}
