//! Bounded test functions and point sets described in configuration files.
//!
//! Every function vanishes at the cemetery. A `tag` restricts a function or set to one
//! tagged copy; without it only the coordinate matters, which is what functions on a
//! projected space need.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::state_space::{Label, SpacePoint, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionSpec {
    Zero,
    Constant {
        value: f64,
    },
    Indicator {
        point: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<u32>,
    },
    /// Values per label; unlisted labels map to `default`.
    Table {
        values: BTreeMap<String, f64>,
        #[serde(default)]
        default: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<u32>,
    },
    /// `1` on `[lo, hi)`.
    IntervalIndicator {
        lo: f64,
        hi: f64,
    },
}

impl FunctionSpec {
    pub fn constant(value: f64) -> Self {
        FunctionSpec::Constant { value }
    }

    pub fn indicator(point: impl Into<Value>) -> Self {
        FunctionSpec::Indicator {
            point: point.into(),
            tag: None,
        }
    }

    pub fn tagged_indicator(tag: u32, point: impl Into<Value>) -> Self {
        FunctionSpec::Indicator {
            point: point.into(),
            tag: Some(tag),
        }
    }

    pub fn table(values: &[(&str, f64)]) -> Self {
        FunctionSpec::Table {
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            default: 0.0,
            tag: None,
        }
    }

    pub fn eval(&self, p: &SpacePoint) -> f64 {
        let (tag, value) = match p {
            SpacePoint::Cemetery => return 0.0,
            SpacePoint::Regular { tag, value } => (*tag, value),
        };
        let tag_ok = |want: &Option<u32>| want.is_none_or(|w| w == tag);
        match self {
            FunctionSpec::Zero => 0.0,
            FunctionSpec::Constant { value } => *value,
            FunctionSpec::Indicator { point, tag: want } => {
                if tag_ok(want) && point == value {
                    1.0
                } else {
                    0.0
                }
            }
            FunctionSpec::Table {
                values,
                default,
                tag: want,
            } => {
                if !tag_ok(want) {
                    return 0.0;
                }
                match value {
                    Value::Label(l) => values.get(l.as_str()).copied().unwrap_or(*default),
                    Value::Real(_) => *default,
                }
            }
            FunctionSpec::IntervalIndicator { lo, hi } => match value {
                Value::Real(x) if *x >= *lo && *x < *hi => 1.0,
                _ => 0.0,
            },
        }
    }

    /// `‖f‖_∞` (an upper bound for tables: the largest listed or default magnitude).
    pub fn sup_norm(&self) -> f64 {
        match self {
            FunctionSpec::Zero => 0.0,
            FunctionSpec::Constant { value } => value.abs(),
            FunctionSpec::Indicator { .. } | FunctionSpec::IntervalIndicator { .. } => 1.0,
            FunctionSpec::Table { values, default, .. } => {
                values.values().fold(default.abs(), |m, v| m.max(v.abs()))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == 0.0
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            FunctionSpec::Zero => Some(0.0),
            FunctionSpec::Constant { value } => Some(*value),
            _ => None,
        }
    }
}

/// A set of points used as a first-entry target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointSet {
    Labels {
        labels: Vec<Label>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<u32>,
    },
    Interval {
        lo: f64,
        hi: f64,
        #[serde(default = "closed")]
        closed: [bool; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<u32>,
    },
    /// Every point carrying this tag (a whole stage space).
    Stage { tag: u32 },
}

fn closed() -> [bool; 2] {
    [true, true]
}

impl PointSet {
    pub fn labels(labels: &[&str], tag: Option<u32>) -> Self {
        PointSet::Labels {
            labels: labels.iter().map(|l| Label::new(l)).collect(),
            tag,
        }
    }

    pub fn contains(&self, p: &SpacePoint) -> bool {
        let (tag, value) = match p {
            SpacePoint::Cemetery => return false,
            SpacePoint::Regular { tag, value } => (*tag, value),
        };
        match self {
            PointSet::Labels { labels, tag: want } => {
                want.is_none_or(|w| w == tag)
                    && matches!(value, Value::Label(l) if labels.contains(l))
            }
            PointSet::Interval {
                lo,
                hi,
                closed,
                tag: want,
            } => {
                want.is_none_or(|w| w == tag)
                    && match value {
                        Value::Real(x) => {
                            (if closed[0] { x >= lo } else { x > lo })
                                && (if closed[1] { x <= hi } else { x < hi })
                        }
                        Value::Label(_) => false,
                    }
            }
            PointSet::Stage { tag: want } => *want == tag,
        }
    }
}
