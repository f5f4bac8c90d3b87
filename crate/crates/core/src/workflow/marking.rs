use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// A multiset of tokens over places.
///
/// Zero counts are never stored, so two markings are equal exactly when they
/// hold the same tokens, and the canonical encoding is unique.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Marking(BTreeMap<String, u32>);

impl Marking {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut m = Marking::new();
        for (p, n) in pairs {
            m.add(&p.into(), n);
        }
        m
    }

    pub fn get(&self, place: &str) -> u32 {
        self.0.get(place).copied().unwrap_or(0)
    }

    pub fn add(&mut self, place: &str, n: u32) {
        if n == 0 {
            return;
        }
        *self.0.entry(place.to_string()).or_insert(0) += n;
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().map(|&n| n as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.0.iter().map(|(p, &n)| (p.as_str(), n))
    }

    pub fn places(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Multiset containment: `other ≤ self`.
    pub fn contains(&self, other: &Marking) -> bool {
        other.iter().all(|(p, n)| self.get(p) >= n)
    }

    /// `self - consume + produce`, or `None` if `consume` is not contained.
    pub fn fire(&self, consume: &Marking, produce: &Marking) -> Option<Marking> {
        if !self.contains(consume) {
            return None;
        }
        let mut out = self.0.clone();
        for (p, n) in consume.iter() {
            let slot = out.get_mut(p).expect("contained place present");
            *slot -= n;
            if *slot == 0 {
                out.remove(p);
            }
        }
        let mut out = Marking(out);
        for (p, n) in produce.iter() {
            out.add(p, n);
        }
        Some(out)
    }
}

impl fmt::Display for Marking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (p, n)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{p}:{n}")?;
        }
        f.write_str("}")
    }
}
