//! State spaces, tagged copies and the cemetery point.
//!
//! Points of a finite state space carry an interned [`Label`], so a [`SpacePoint`] is
//! `Copy` and comparing two points never touches string data. Tag `0` denotes the
//! untagged (projected) space; concatenation stages use tags `n >= 1`.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{OnceLock, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Interned state label.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(u32);

#[derive(Default)]
struct Interner {
    ids: HashMap<&'static str, u32>,
    names: Vec<&'static str>,
}

fn interner() -> &'static RwLock<Interner> {
    static INTERNER: OnceLock<RwLock<Interner>> = OnceLock::new();
    INTERNER.get_or_init(Default::default)
}

impl Label {
    pub fn new(name: &str) -> Self {
        if let Some(&id) = interner().read().unwrap().ids.get(name) {
            return Label(id);
        }
        let mut table = interner().write().unwrap();
        if let Some(&id) = table.ids.get(name) {
            return Label(id);
        }
        // Labels live for the whole program; leaking keeps `as_str` borrow-free.
        let name: &'static str = Box::leak(name.to_owned().into_boxed_str());
        let id = table.names.len() as u32;
        table.names.push(name);
        table.ids.insert(name, id);
        Label(id)
    }

    pub fn as_str(&self) -> &'static str {
        interner().read().unwrap().names[self.0 as usize]
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_str())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::new(s)
    }
}

/// Coordinate of a regular point: a label of a finite space or a real coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Label(Label),
    Real(f64),
}

impl Value {
    pub fn label(name: &str) -> Self {
        Value::Label(Label::new(name))
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Label(_) => None,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Value::Label(l) => {
                0u8.hash(state);
                l.hash(state);
            }
            Value::Real(x) => {
                1u8.hash(state);
                // +0.0 and -0.0 compare equal, so they must hash equal.
                let x = if *x == 0.0 { 0.0 } else { *x };
                x.to_bits().hash(state);
            }
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Label(l) => write!(f, "{l}"),
            Value::Real(x) => write!(f, "{x}"),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::label(s)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Real(x)
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Value::Label(l) => s.serialize_str(l.as_str()),
            Value::Real(x) => s.serialize_f64(*x),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(x) => Value::Real(x),
            Raw::Str(s) => Value::label(&s),
        })
    }
}

/// A state of some tagged space, or the cemetery `Δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpacePoint {
    Cemetery,
    Regular { tag: u32, value: Value },
}

impl SpacePoint {
    pub fn regular(tag: u32, value: impl Into<Value>) -> Self {
        SpacePoint::Regular {
            tag,
            value: value.into(),
        }
    }

    pub fn is_cemetery(&self) -> bool {
        matches!(self, SpacePoint::Cemetery)
    }

    pub fn tag(&self) -> Option<u32> {
        match self {
            SpacePoint::Regular { tag, .. } => Some(*tag),
            SpacePoint::Cemetery => None,
        }
    }

    pub fn value(&self) -> Option<Value> {
        match self {
            SpacePoint::Regular { value, .. } => Some(*value),
            SpacePoint::Cemetery => None,
        }
    }

    /// Same coordinate under a different tag; the cemetery is left alone.
    pub fn with_tag(self, tag: u32) -> Self {
        match self {
            SpacePoint::Regular { value, .. } => SpacePoint::Regular { tag, value },
            SpacePoint::Cemetery => SpacePoint::Cemetery,
        }
    }

    /// Tag erasure onto the projected space (tag `0`).
    pub fn untagged(self) -> Self {
        self.with_tag(0)
    }
}

/// JSON form: `null` for the cemetery, `{"tag": n, "value": v}` otherwise.
impl Serialize for SpacePoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Raw {
            tag: u32,
            value: Value,
        }
        match self {
            SpacePoint::Cemetery => s.serialize_none(),
            SpacePoint::Regular { tag, value } => s.serialize_some(&Raw {
                tag: *tag,
                value: *value,
            }),
        }
    }
}

impl<'de> Deserialize<'de> for SpacePoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            tag: u32,
            value: Value,
        }
        Ok(match Option::<Raw>::deserialize(d)? {
            None => SpacePoint::Cemetery,
            Some(Raw { tag, value }) => SpacePoint::Regular { tag, value },
        })
    }
}

impl fmt::Display for SpacePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpacePoint::Cemetery => f.write_str("Δ"),
            SpacePoint::Regular { tag, value } => write!(f, "({tag}, {value})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSpaceDesc {
    #[serde(rename = "labels")]
    FiniteLabels { labels: Vec<Label> },
    #[serde(rename = "interval")]
    RealInterval {
        lo: f64,
        hi: f64,
        #[serde(default = "both_closed")]
        closed: [bool; 2],
    },
}

fn both_closed() -> [bool; 2] {
    [true, true]
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Label::new(&s))
    }
}

impl StateSpaceDesc {
    pub fn labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let desc = StateSpaceDesc::FiniteLabels {
            labels: labels.iter().map(|s| Label::new(s.as_ref())).collect(),
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn interval(lo: f64, hi: f64, closed: [bool; 2]) -> Result<Self> {
        let desc = StateSpaceDesc::RealInterval { lo, hi, closed };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StateSpaceDesc::FiniteLabels { labels } => {
                if labels.is_empty() {
                    return Err(Error::config("label space must be non-empty"));
                }
                let mut seen = std::collections::HashSet::new();
                for l in labels {
                    if !seen.insert(*l) {
                        return Err(Error::config(format!("duplicate label {l}")));
                    }
                }
                Ok(())
            }
            StateSpaceDesc::RealInterval { lo, hi, .. } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::config(format!("invalid interval [{lo}, {hi}]")));
                }
                Ok(())
            }
        }
    }

    pub fn contains_value(&self, v: &Value) -> bool {
        match (self, v) {
            (StateSpaceDesc::FiniteLabels { labels }, Value::Label(l)) => labels.contains(l),
            (StateSpaceDesc::RealInterval { lo, hi, closed }, Value::Real(x)) => {
                let above = if closed[0] { *x >= *lo } else { *x > *lo };
                let below = if closed[1] { *x <= *hi } else { *x < *hi };
                above && below
            }
            _ => false,
        }
    }

    /// Intersection of two descriptors of the same kind; `None` when empty.
    pub fn intersect(&self, other: &StateSpaceDesc) -> Result<Option<StateSpaceDesc>> {
        match (self, other) {
            (StateSpaceDesc::FiniteLabels { labels: a }, StateSpaceDesc::FiniteLabels { labels: b }) => {
                let labels: Vec<Label> = a.iter().copied().filter(|l| b.contains(l)).collect();
                Ok((!labels.is_empty()).then_some(StateSpaceDesc::FiniteLabels { labels }))
            }
            (
                StateSpaceDesc::RealInterval { lo: lo_a, hi: hi_a, closed: ca },
                StateSpaceDesc::RealInterval { lo: lo_b, hi: hi_b, closed: cb },
            ) => {
                let (lo, lo_closed) = match lo_a.partial_cmp(lo_b).unwrap() {
                    std::cmp::Ordering::Greater => (*lo_a, ca[0]),
                    std::cmp::Ordering::Less => (*lo_b, cb[0]),
                    std::cmp::Ordering::Equal => (*lo_a, ca[0] && cb[0]),
                };
                let (hi, hi_closed) = match hi_a.partial_cmp(hi_b).unwrap() {
                    std::cmp::Ordering::Less => (*hi_a, ca[1]),
                    std::cmp::Ordering::Greater => (*hi_b, cb[1]),
                    std::cmp::Ordering::Equal => (*hi_a, ca[1] && cb[1]),
                };
                // Degenerate single points are not representable as intervals.
                Ok((lo < hi).then_some(StateSpaceDesc::RealInterval {
                    lo,
                    hi,
                    closed: [lo_closed, hi_closed],
                }))
            }
            _ => Err(Error::config(
                "cannot intersect a label space with an interval space",
            )),
        }
    }
}

/// `{tag} × base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggedSpace {
    pub tag: u32,
    pub base: StateSpaceDesc,
}

impl TaggedSpace {
    pub fn new(tag: u32, base: StateSpaceDesc) -> Self {
        Self { tag, base }
    }

    pub fn contains(&self, p: &SpacePoint) -> bool {
        match p {
            SpacePoint::Cemetery => false,
            SpacePoint::Regular { tag, value } => *tag == self.tag && self.base.contains_value(value),
        }
    }

    pub fn retagged(&self, tag: u32) -> Self {
        Self {
            tag,
            base: self.base.clone(),
        }
    }
}

/// Tag of the unique space in `spaces` containing `p`.
pub fn union_membership(spaces: &[TaggedSpace], p: &SpacePoint) -> Result<Option<u32>> {
    for (i, a) in spaces.iter().enumerate() {
        if spaces[i + 1..].iter().any(|b| b.tag == a.tag) {
            return Err(Error::config(format!("tag {} used by two spaces", a.tag)));
        }
    }
    Ok(spaces.iter().find(|s| s.contains(p)).map(|s| s.tag))
}
