//! Labeled tensor-product Hilbert spaces.
//!
//! A [`Space`] is an ordered list of subsystems, each with a finite alphabet of
//! level names. Subsystems are kept sorted by id so that two spaces built from
//! the same factors in a different order are identical. A [`BasisLabel`] holds
//! one level index per subsystem, in the order of its space.
//!
//! States and operators are sparse maps keyed by basis labels. Reduced states
//! ([`DensityMatrix`]) are dense since they only ever live on a handful of
//! subsystems.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::ser::{SerializeSeq, SerializeStruct};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// Default floor on the norm below which [`normalize`] refuses to rescale.
pub const NORM_FLOOR: f64 = 1e-14;

/// Amplitude allowed on levels that are about to be truncated away.
pub const LEAKAGE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("subsystem `{0}` declared more than once")]
    DuplicateSubsystem(String),
    #[error("subsystem `{0}` has an empty alphabet")]
    EmptyAlphabet(String),
    #[error("cannot compose spaces: subsystem `{0}` present in both")]
    Composition(String),
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("unknown subsystem `{0}`")]
    UnknownSubsystem(String),
    #[error("level `{level}` is not in the alphabet of `{subsystem}`")]
    UnknownLevel { subsystem: String, level: String },
    #[error("label does not name every subsystem of the space (missing `{0}`)")]
    IncompleteLabel(String),
    #[error("partial trace needs a nonempty keep set")]
    EmptyKeep,
    #[error("degenerate branch: norm {norm:e} is below the floor {floor:e}")]
    DegenerateBranch { norm: f64, floor: f64 },
    #[error("target state is not normalized (squared norm {0})")]
    NotNormalized(f64),
    #[error("amplitude {amplitude:e} on level `{level}` of `{subsystem}` would be truncated")]
    Leakage {
        subsystem: String,
        level: String,
        amplitude: f64,
    },
}

pub type Result<T> = std::result::Result<T, StateError>;

/// One tensor factor: an id and the names of its levels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subsystem {
    pub id: String,
    pub levels: Vec<String>,
}

impl Subsystem {
    pub fn new<S: Into<String>>(id: S, levels: &[&str]) -> Self {
        Self {
            id: id.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Photon-number mode truncated at `max` quanta.
    pub fn mode<S: Into<String>>(id: S, max: usize) -> Self {
        Self {
            id: id.into(),
            levels: (0..=max).map(|n| n.to_string()).collect(),
        }
    }

    /// Two-level system with levels `0`, `1`.
    pub fn qubit<S: Into<String>>(id: S) -> Self {
        Self::new(id, &["0", "1"])
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, level: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| StateError::UnknownLevel {
                subsystem: self.id.clone(),
                level: level.to_string(),
            })
    }
}

/// Level indices, one per subsystem of the owning space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BasisLabel(pub Vec<u16>);

impl BasisLabel {
    pub fn levels(&self) -> &[u16] {
        &self.0
    }
}

/// Ordered set of subsystems. Canonical order is ascending id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Space {
    subsystems: Vec<Subsystem>,
}

impl Space {
    pub fn new(mut subsystems: Vec<Subsystem>) -> Result<Self> {
        subsystems.sort_by(|a, b| a.id.cmp(&b.id));
        for w in subsystems.windows(2) {
            if w[0].id == w[1].id {
                return Err(StateError::DuplicateSubsystem(w[0].id.clone()));
            }
        }
        if let Some(s) = subsystems.iter().find(|s| s.levels.is_empty()) {
            return Err(StateError::EmptyAlphabet(s.id.clone()));
        }
        Ok(Self { subsystems })
    }

    pub fn empty() -> Self {
        Self {
            subsystems: Vec::new(),
        }
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.subsystems.iter().map(|s| s.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.subsystems
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
    }

    pub fn subsystem(&self, id: &str) -> Result<&Subsystem> {
        self.position(id)
            .map(|p| &self.subsystems[p])
            .ok_or_else(|| StateError::UnknownSubsystem(id.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.subsystems.iter().map(Subsystem::dim).product()
    }

    /// Row-major (first subsystem most significant) dense index.
    pub fn index(&self, label: &BasisLabel) -> usize {
        self.subsystems
            .iter()
            .zip(&label.0)
            .fold(0, |acc, (s, &l)| acc * s.dim() + l as usize)
    }

    pub fn label_at(&self, mut index: usize) -> BasisLabel {
        let mut levels = vec![0u16; self.subsystems.len()];
        for (slot, s) in levels.iter_mut().zip(&self.subsystems).rev() {
            *slot = (index % s.dim()) as u16;
            index /= s.dim();
        }
        BasisLabel(levels)
    }

    pub fn labels(&self) -> impl Iterator<Item = BasisLabel> + '_ {
        (0..self.dim()).map(move |i| self.label_at(i))
    }

    /// Build a label from `(subsystem, level)` names. Every subsystem must be named.
    pub fn label(&self, factors: &[(&str, &str)]) -> Result<BasisLabel> {
        let mut levels: Vec<Option<u16>> = vec![None; self.subsystems.len()];
        for (id, level) in factors {
            let p = self
                .position(id)
                .ok_or_else(|| StateError::UnknownSubsystem(id.to_string()))?;
            levels[p] = Some(self.subsystems[p].level_index(level)? as u16);
        }
        levels
            .into_iter()
            .zip(&self.subsystems)
            .map(|(l, s)| l.ok_or_else(|| StateError::IncompleteLabel(s.id.clone())))
            .collect::<Result<Vec<_>>>()
            .map(BasisLabel)
    }

    /// Human-readable factors of a label.
    pub fn describe(&self, label: &BasisLabel) -> Vec<(String, String)> {
        self.subsystems
            .iter()
            .zip(&label.0)
            .map(|(s, &l)| (s.id.clone(), s.levels[l as usize].clone()))
            .collect()
    }

    pub fn level_name(&self, label: &BasisLabel, id: &str) -> Result<&str> {
        let p = self
            .position(id)
            .ok_or_else(|| StateError::UnknownSubsystem(id.to_string()))?;
        Ok(&self.subsystems[p].levels[label.0[p] as usize])
    }

    /// Disjoint union.
    pub fn union(&self, other: &Space) -> Result<Space> {
        if let Some(s) = other.subsystems.iter().find(|s| self.position(&s.id).is_some()) {
            return Err(StateError::Composition(s.id.clone()));
        }
        let mut all = self.subsystems.clone();
        all.extend(other.subsystems.iter().cloned());
        Space::new(all)
    }

    /// The subsystems of `self` whose ids are in `ids`.
    pub fn restrict(&self, ids: &BTreeSet<String>) -> Result<Space> {
        for id in ids {
            self.subsystem(id)?;
        }
        Ok(Space {
            subsystems: self
                .subsystems
                .iter()
                .filter(|s| ids.contains(&s.id))
                .cloned()
                .collect(),
        })
    }

    pub fn without(&self, ids: &BTreeSet<String>) -> Space {
        Space {
            subsystems: self
                .subsystems
                .iter()
                .filter(|s| !ids.contains(&s.id))
                .cloned()
                .collect(),
        }
    }

    /// True when every subsystem of `sub` appears in `self` with the same alphabet.
    pub fn contains(&self, sub: &Space) -> bool {
        sub.subsystems
            .iter()
            .all(|s| self.position(&s.id).map(|p| &self.subsystems[p] == s) == Some(true))
    }

    pub fn id_set(&self) -> BTreeSet<String> {
        self.subsystems.iter().map(|s| s.id.clone()).collect()
    }

    /// Positions in `self` of each subsystem of `sub`.
    fn positions_of(&self, sub: &Space) -> Vec<usize> {
        sub.subsystems
            .iter()
            .map(|s| self.position(&s.id).expect("checked subset"))
            .collect()
    }
}

/// Splits labels of a space into a "selected" part and the remainder, and
/// merges them back.
struct Splitter {
    selected: Vec<usize>,
    rest: Vec<usize>,
}

impl Splitter {
    fn new(space: &Space, selected: &Space) -> Self {
        let selected_pos = space.positions_of(selected);
        let rest = (0..space.len()).filter(|p| !selected_pos.contains(p)).collect();
        Self {
            selected: selected_pos,
            rest,
        }
    }

    fn split(&self, label: &BasisLabel) -> (BasisLabel, BasisLabel) {
        (
            BasisLabel(self.selected.iter().map(|&p| label.0[p]).collect()),
            BasisLabel(self.rest.iter().map(|&p| label.0[p]).collect()),
        )
    }
}

/// Merges labels of two disjoint spaces into labels of their union.
struct Merger {
    // for each subsystem of the union: (from_left, position in that side)
    sources: Vec<(bool, usize)>,
}

impl Merger {
    fn new(union: &Space, left: &Space, right: &Space) -> Self {
        let sources = union
            .subsystems
            .iter()
            .map(|s| match left.position(&s.id) {
                Some(p) => (true, p),
                None => (false, right.position(&s.id).expect("union member")),
            })
            .collect();
        Self { sources }
    }

    fn merge(&self, left: &BasisLabel, right: &BasisLabel) -> BasisLabel {
        BasisLabel(
            self.sources
                .iter()
                .map(|&(l, p)| if l { left.0[p] } else { right.0[p] })
                .collect(),
        )
    }
}

/// Sparse ket over a labeled space.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    space: Space,
    amps: BTreeMap<BasisLabel, C64>,
}

impl StateVector {
    pub fn zero(space: Space) -> Self {
        Self {
            space,
            amps: BTreeMap::new(),
        }
    }

    /// Unit ket `|factors⟩`.
    pub fn basis(space: &Space, factors: &[(&str, &str)]) -> Result<Self> {
        let label = space.label(factors)?;
        let mut amps = BTreeMap::new();
        amps.insert(label, C64::new(1.0, 0.0));
        Ok(Self {
            space: space.clone(),
            amps,
        })
    }

    /// Superposition `Σ c_k |factors_k⟩`.
    pub fn from_terms(space: &Space, terms: &[(C64, &[(&str, &str)])]) -> Result<Self> {
        let mut out = Self::zero(space.clone());
        for (c, factors) in terms {
            let label = space.label(factors)?;
            *out.amps.entry(label).or_insert(C64::new(0.0, 0.0)) += c;
        }
        out.prune();
        Ok(out)
    }

    pub fn from_map(space: Space, amps: BTreeMap<BasisLabel, C64>) -> Self {
        let mut out = Self { space, amps };
        out.prune();
        out
    }

    pub fn from_dense(space: &Space, data: &[C64]) -> Self {
        assert_eq!(data.len(), space.dim(), "dense vector has wrong length");
        let amps = data
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != C64::new(0.0, 0.0))
            .map(|(i, c)| (space.label_at(i), *c))
            .collect();
        Self {
            space: space.clone(),
            amps,
        }
    }

    pub fn to_dense(&self) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.space.dim()];
        for (l, c) in &self.amps {
            out[self.space.index(l)] = *c;
        }
        out
    }

    fn prune(&mut self) {
        self.amps.retain(|_, c| *c != C64::new(0.0, 0.0));
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn amplitudes(&self) -> &BTreeMap<BasisLabel, C64> {
        &self.amps
    }

    pub fn amplitude(&self, factors: &[(&str, &str)]) -> Result<C64> {
        let label = self.space.label(factors)?;
        Ok(self.amps.get(&label).copied().unwrap_or_default())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Squared norm is at most one (sub-normalized states are allowed).
    pub fn is_physical(&self) -> bool {
        self.norm_sqr() <= 1.0 + 1e-12
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.amps.values_mut().for_each(|a| *a *= c);
        out.prune();
        out
    }

    pub fn add(&self, other: &StateVector) -> Result<Self> {
        if self.space != other.space {
            return Err(StateError::SpaceMismatch("cannot add states on different spaces".into()));
        }
        let mut out = self.clone();
        for (l, c) in &other.amps {
            *out.amps.entry(l.clone()).or_default() += c;
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &StateVector) -> Result<Self> {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
    }

    /// Exchange the levels of two subsystems with identical alphabets.
    pub fn swap_subsystems(&self, a: &str, b: &str) -> Result<Self> {
        let pa = self
            .space
            .position(a)
            .ok_or_else(|| StateError::UnknownSubsystem(a.into()))?;
        let pb = self
            .space
            .position(b)
            .ok_or_else(|| StateError::UnknownSubsystem(b.into()))?;
        if self.space.subsystems[pa].levels != self.space.subsystems[pb].levels {
            return Err(StateError::SpaceMismatch(format!(
                "`{a}` and `{b}` have different alphabets"
            )));
        }
        let amps = self
            .amps
            .iter()
            .map(|(l, c)| {
                let mut l = l.clone();
                l.0.swap(pa, pb);
                (l, *c)
            })
            .collect();
        Ok(Self {
            space: self.space.clone(),
            amps,
        })
    }

    /// Condition on subsystem `id` being in `level` and drop that subsystem.
    /// The result is not renormalized.
    pub fn select(&self, id: &str, level: &str) -> Result<Self> {
        let p = self
            .space
            .position(id)
            .ok_or_else(|| StateError::UnknownSubsystem(id.into()))?;
        let li = self.space.subsystems[p].level_index(level)? as u16;
        let mut subs = self.space.subsystems.clone();
        subs.remove(p);
        let space = Space { subsystems: subs };
        let amps = self
            .amps
            .iter()
            .filter(|(l, _)| l.0[p] == li)
            .map(|(l, c)| {
                let mut l = l.clone();
                l.0.remove(p);
                (l, *c)
            })
            .collect();
        Ok(Self { space, amps })
    }

    /// Re-express subsystem `id` over a new alphabet, matching levels by
    /// name. Amplitude on levels absent from the new alphabet must be below
    /// [`LEAKAGE_TOL`]; it is discarded.
    pub fn with_alphabet(&self, id: &str, levels: &[&str]) -> Result<Self> {
        let p = self
            .space
            .position(id)
            .ok_or_else(|| StateError::UnknownSubsystem(id.into()))?;
        let old = &self.space.subsystems[p];
        let map: Vec<Option<u16>> = old
            .levels
            .iter()
            .map(|l| levels.iter().position(|n| n == l).map(|i| i as u16))
            .collect();
        let mut subs = self.space.subsystems.clone();
        subs[p] = Subsystem::new(id, levels);
        let space = Space::new(subs)?;
        let mut amps = BTreeMap::new();
        for (l, c) in &self.amps {
            match map[l.0[p] as usize] {
                Some(n) => {
                    let mut l = l.clone();
                    l.0[p] = n;
                    amps.insert(l, *c);
                }
                None if c.norm() < LEAKAGE_TOL => {}
                None => {
                    return Err(StateError::Leakage {
                        subsystem: id.into(),
                        level: old.levels[l.0[p] as usize].clone(),
                        amplitude: c.norm(),
                    })
                }
            }
        }
        Ok(Self { space, amps })
    }

    /// Rename a subsystem, keeping its alphabet.
    pub fn rename_subsystem(&self, from: &str, to: &str) -> Result<Self> {
        let old = self.space.subsystem(from)?.clone();
        let mut subs: Vec<Subsystem> = self
            .space
            .subsystems
            .iter()
            .filter(|s| s.id != from)
            .cloned()
            .collect();
        subs.push(Subsystem {
            id: to.to_string(),
            levels: old.levels,
        });
        let space = Space::new(subs)?;
        let merger_src = self.space.position(from).expect("present");
        let amps = self
            .amps
            .iter()
            .map(|(l, c)| {
                let label = BasisLabel(
                    space
                        .subsystems
                        .iter()
                        .map(|s| {
                            let p = if s.id == to {
                                merger_src
                            } else {
                                self.space.position(&s.id).expect("kept")
                            };
                            l.0[p]
                        })
                        .collect(),
                );
                (label, *c)
            })
            .collect();
        Ok(Self { space, amps })
    }
}

impl Serialize for StateVector {
    /// List of `{label: [[subsystem, level], ...], re, im}` in canonical label order.
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Entry<'a>(&'a Space, &'a BasisLabel, C64);
        impl Serialize for Entry<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                let mut st = s.serialize_struct("Amplitude", 3)?;
                st.serialize_field("label", &self.0.describe(self.1))?;
                st.serialize_field("re", &self.2.re)?;
                st.serialize_field("im", &self.2.im)?;
                st.end()
            }
        }
        let mut seq = serializer.serialize_seq(Some(self.amps.len()))?;
        for (l, c) in &self.amps {
            seq.serialize_element(&Entry(&self.space, l, *c))?;
        }
        seq.end()
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (l, c) in &self.amps {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            let ket: Vec<String> = self
                .space
                .describe(l)
                .into_iter()
                .map(|(id, lv)| format!("{id}={lv}"))
                .collect();
            write!(f, "({:.6}{:+.6}i)|{}⟩", c.re, c.im, ket.join(","))?;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

/// `a ⊗ b`.
pub fn tensor(a: &StateVector, b: &StateVector) -> Result<StateVector> {
    let space = a.space.union(&b.space)?;
    let merger = Merger::new(&space, &a.space, &b.space);
    let mut amps = BTreeMap::new();
    for (la, ca) in &a.amps {
        for (lb, cb) in &b.amps {
            amps.insert(merger.merge(la, lb), ca * cb);
        }
    }
    Ok(StateVector::from_map(space, amps))
}

/// `⟨a|b⟩`, conjugate-linear in `a`.
pub fn inner(a: &StateVector, b: &StateVector) -> Result<C64> {
    if a.space != b.space {
        return Err(StateError::SpaceMismatch(
            "inner product of states on different spaces".into(),
        ));
    }
    Ok(a.amps
        .iter()
        .filter_map(|(l, ca)| b.amps.get(l).map(|cb| ca.conj() * cb))
        .sum())
}

/// Returns the unit-norm state and the original squared norm.
pub fn normalize(s: &StateVector) -> Result<(StateVector, f64)> {
    normalize_with_floor(s, NORM_FLOOR)
}

pub fn normalize_with_floor(s: &StateVector, floor: f64) -> Result<(StateVector, f64)> {
    let n2 = s.norm_sqr();
    let n = n2.sqrt();
    if !(n > floor) {
        return Err(StateError::DegenerateBranch { norm: n, floor });
    }
    Ok((s.scaled(C64::new(1.0 / n, 0.0)), n2))
}

/// Sparse linear map from the `domain` subsystems to the `codomain`
/// subsystems. Applied to a larger state it acts as identity on everything
/// else. Most operators are square (`domain == codomain`); relabeling maps
/// such as waveplates and path renames are not.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator {
    domain: Space,
    codomain: Space,
    /// `(out, in) -> value`
    entries: BTreeMap<(BasisLabel, BasisLabel), C64>,
}

impl LinearOperator {
    pub fn zero(domain: Space, codomain: Space) -> Self {
        Self {
            domain,
            codomain,
            entries: BTreeMap::new(),
        }
    }

    pub fn identity(space: &Space) -> Self {
        let entries = space
            .labels()
            .map(|l| ((l.clone(), l), C64::new(1.0, 0.0)))
            .collect();
        Self {
            domain: space.clone(),
            codomain: space.clone(),
            entries,
        }
    }

    /// `|ket⟩⟨bra|`.
    pub fn outer(ket: &StateVector, bra: &StateVector) -> Self {
        let mut entries = BTreeMap::new();
        for (lk, ck) in &ket.amps {
            for (lb, cb) in &bra.amps {
                entries.insert((lk.clone(), lb.clone()), ck * cb.conj());
            }
        }
        Self {
            domain: bra.space.clone(),
            codomain: ket.space.clone(),
            entries,
        }
    }

    /// Build column by column: `f(in)` lists the `(out, value)` pairs.
    pub fn from_columns<F>(domain: &Space, codomain: &Space, mut f: F) -> Self
    where
        F: FnMut(&BasisLabel) -> Vec<(BasisLabel, C64)>,
    {
        let mut entries = BTreeMap::new();
        for l in domain.labels() {
            for (out, v) in f(&l) {
                if v != C64::new(0.0, 0.0) {
                    *entries.entry((out, l.clone())).or_default() += v;
                }
            }
        }
        Self {
            domain: domain.clone(),
            codomain: codomain.clone(),
            entries,
        }
    }

    pub fn domain(&self) -> &Space {
        &self.domain
    }

    pub fn codomain(&self) -> &Space {
        &self.codomain
    }

    pub fn entries(&self) -> &BTreeMap<(BasisLabel, BasisLabel), C64> {
        &self.entries
    }

    pub fn entry(&self, out: &[(&str, &str)], inp: &[(&str, &str)]) -> Result<C64> {
        let lo = self.codomain.label(out)?;
        let li = self.domain.label(inp)?;
        Ok(self.entries.get(&(lo, li)).copied().unwrap_or_default())
    }

    pub fn insert(&mut self, out: &[(&str, &str)], inp: &[(&str, &str)], v: C64) -> Result<()> {
        let lo = self.codomain.label(out)?;
        let li = self.domain.label(inp)?;
        *self.entries.entry((lo, li)).or_default() += v;
        Ok(())
    }

    pub fn is_square(&self) -> bool {
        self.domain == self.codomain
    }

    pub fn scaled(&self, c: C64) -> Self {
        let mut out = self.clone();
        out.entries.values_mut().for_each(|v| *v *= c);
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.domain != other.domain || self.codomain != other.codomain {
            return Err(StateError::SpaceMismatch("operator sum on different spaces".into()));
        }
        let mut out = self.clone();
        for (k, v) in &other.entries {
            *out.entries.entry(k.clone()).or_default() += v;
        }
        out.entries.retain(|_, v| *v != C64::new(0.0, 0.0));
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
    }

    pub fn adjoint(&self) -> Self {
        Self {
            domain: self.codomain.clone(),
            codomain: self.domain.clone(),
            entries: self
                .entries
                .iter()
                .map(|((o, i), v)| ((i.clone(), o.clone()), v.conj()))
                .collect(),
        }
    }

    /// `self ∘ rhs`.
    pub fn compose(&self, rhs: &Self) -> Result<Self> {
        if self.domain != rhs.codomain {
            return Err(StateError::SpaceMismatch("operator composition".into()));
        }
        let mut by_row: BTreeMap<&BasisLabel, Vec<(&BasisLabel, C64)>> = BTreeMap::new();
        for ((o, i), v) in &self.entries {
            by_row.entry(i).or_default().push((o, *v));
        }
        let mut entries: BTreeMap<(BasisLabel, BasisLabel), C64> = BTreeMap::new();
        for ((mid, i), v) in &rhs.entries {
            if let Some(outs) = by_row.get(mid) {
                for (o, w) in outs {
                    *entries.entry(((*o).clone(), i.clone())).or_default() += w * v;
                }
            }
        }
        entries.retain(|_, v| *v != C64::new(0.0, 0.0));
        Ok(Self {
            domain: rhs.domain.clone(),
            codomain: self.codomain.clone(),
            entries,
        })
    }

    /// `self ⊗ other` on disjoint subsystems.
    pub fn kron(&self, other: &Self) -> Result<Self> {
        let dom = self.domain.union(&other.domain)?;
        let cod = self.codomain.union(&other.codomain)?;
        let md = Merger::new(&dom, &self.domain, &other.domain);
        let mc = Merger::new(&cod, &self.codomain, &other.codomain);
        let mut entries = BTreeMap::new();
        for ((o1, i1), v1) in &self.entries {
            for ((o2, i2), v2) in &other.entries {
                entries.insert((mc.merge(o1, o2), md.merge(i1, i2)), v1 * v2);
            }
        }
        Ok(Self {
            domain: dom,
            codomain: cod,
            entries,
        })
    }

    /// Explicit `self ⊗ I` over the extra subsystems of `space`.
    pub fn extend_identity(&self, space: &Space) -> Result<Self> {
        let extra = space.without(&self.domain.id_set());
        self.kron(&LinearOperator::identity(&extra))
    }

    /// Dense `codomain.dim × domain.dim` matrix, row-major.
    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.codomain.dim(), self.domain.dim());
        for ((o, i), v) in &self.entries {
            m[(self.codomain.index(o), self.domain.index(i))] += v;
        }
        m
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.is_square()
            && self.entries.iter().all(|((o, i), v)| {
                let t = self
                    .entries
                    .get(&(i.clone(), o.clone()))
                    .copied()
                    .unwrap_or_default();
                (v - t.conj()).norm() <= tol
            })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self
            .sub(other)?
            .entries
            .values()
            .map(|v| v.norm())
            .fold(0.0, f64::max))
    }
}

/// Matrix–vector product with implicit identity on the subsystems `op`
/// does not touch.
pub fn apply(op: &LinearOperator, s: &StateVector) -> Result<StateVector> {
    if !s.space.contains(&op.domain) {
        let missing = op
            .domain
            .subsystems
            .iter()
            .find(|d| s.space.position(&d.id).is_none())
            .map(|d| d.id.clone());
        return Err(match missing {
            Some(id) => StateError::UnknownSubsystem(id),
            None => StateError::SpaceMismatch("operator alphabet differs from state".into()),
        });
    }
    let rest_space = s.space.without(&op.domain.id_set());
    let out_space = rest_space.union(&op.codomain)?;
    let splitter = Splitter::new(&s.space, &op.domain);
    let merger = Merger::new(&out_space, &op.codomain, &rest_space);

    let mut columns: BTreeMap<&BasisLabel, Vec<(&BasisLabel, C64)>> = BTreeMap::new();
    for ((o, i), v) in &op.entries {
        columns.entry(i).or_default().push((o, *v));
    }
    let mut amps: BTreeMap<BasisLabel, C64> = BTreeMap::new();
    for (l, c) in &s.amps {
        let (dom, rest) = splitter.split(l);
        if let Some(col) = columns.get(&dom) {
            for (o, v) in col {
                *amps.entry(merger.merge(o, &rest)).or_default() += v * c;
            }
        }
    }
    Ok(StateVector::from_map(out_space, amps))
}

/// Dense density operator on a (small) labeled space.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    space: Space,
    data: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn from_matrix(space: Space, data: DMatrix<C64>) -> Self {
        assert_eq!(data.nrows(), space.dim());
        assert_eq!(data.ncols(), space.dim());
        Self { space, data }
    }

    pub fn zero(space: Space) -> Self {
        let n = space.dim();
        Self {
            space,
            data: DMatrix::zeros(n, n),
        }
    }

    pub fn from_pure(s: &StateVector) -> Self {
        let v = nalgebra::DVector::from_vec(s.to_dense());
        Self {
            space: s.space.clone(),
            data: &v * v.adjoint(),
        }
    }

    /// `I / dim`.
    pub fn maximally_mixed(space: &Space) -> Self {
        let n = space.dim();
        Self {
            space: space.clone(),
            data: DMatrix::identity(n, n) * C64::new(1.0 / n as f64, 0.0),
        }
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn entry(&self, row: &[(&str, &str)], col: &[(&str, &str)]) -> Result<C64> {
        let r = self.space.index(&self.space.label(row)?);
        let c = self.space.index(&self.space.label(col)?);
        Ok(self.data[(r, c)])
    }

    pub fn trace(&self) -> f64 {
        self.data.trace().re
    }

    pub fn scaled(&self, x: f64) -> Self {
        Self {
            space: self.space.clone(),
            data: &self.data * C64::new(x, 0.0),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.space != other.space {
            return Err(StateError::SpaceMismatch("density sum on different spaces".into()));
        }
        Ok(Self {
            space: self.space.clone(),
            data: &self.data + &other.data,
        })
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (&self.data - self.data.adjoint()).iter().all(|v| v.norm() <= tol)
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (&self.data + self.data.adjoint()) * C64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Weighted pure components `(λ_k, |v_k⟩)` with `λ_k > cutoff`.
    pub fn eigen_components(&self, cutoff: f64) -> Vec<(f64, StateVector)> {
        let h = (&self.data + self.data.adjoint()) * C64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        let mut out: Vec<(f64, StateVector)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > cutoff)
            .map(|(k, &l)| {
                let col: Vec<C64> = eig.eigenvectors.column(k).iter().copied().collect();
                (l, StateVector::from_dense(&self.space, &col))
            })
            .collect();
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        out
    }

    /// Checks the density-matrix invariants: Hermitian, trace in `[0, 1]`,
    /// eigenvalues not below `-1e-10`.
    pub fn is_physical(&self) -> bool {
        let tr = self.trace();
        self.is_hermitian(1e-12)
            && (-1e-12..=1.0 + 1e-12).contains(&tr)
            && self.eigenvalues().first().is_none_or(|&l| l >= -1e-10)
    }

    /// `op ρ op†`, with identity on the untouched subsystems.
    pub fn conjugate_by(&self, op: &LinearOperator) -> Result<Self> {
        if !self.space.contains(&op.domain) {
            return Err(StateError::SpaceMismatch(
                "operator acts outside the density matrix space".into(),
            ));
        }
        let rest = self.space.without(&op.domain.id_set());
        let out_space = rest.union(&op.codomain)?;
        let full = op.kron(&LinearOperator::identity(&rest))?;
        // `full` has domain/codomain in canonical order; permute into dense form.
        let m = full.to_dense();
        debug_assert_eq!(full.domain, self.space);
        let data = &m * &self.data * m.adjoint();
        Ok(Self {
            space: out_space,
            data,
        })
    }

    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let space = self.space.union(&other.space)?;
        let merger = Merger::new(&space, &self.space, &other.space);
        let mut data = DMatrix::zeros(space.dim(), space.dim());
        for (i1, r1) in self.space.labels().enumerate() {
            for (j1, c1) in self.space.labels().enumerate() {
                let v1 = self.data[(i1, j1)];
                if v1 == C64::new(0.0, 0.0) {
                    continue;
                }
                for (i2, r2) in other.space.labels().enumerate() {
                    for (j2, c2) in other.space.labels().enumerate() {
                        let r = space.index(&merger.merge(&r1, &r2));
                        let c = space.index(&merger.merge(&c1, &c2));
                        data[(r, c)] = v1 * other.data[(i2, j2)];
                    }
                }
            }
        }
        Ok(Self { space, data })
    }

    /// Rename a subsystem.
    pub fn rename_subsystem(&self, from: &str, to: &str) -> Result<Self> {
        let old = self.space.subsystem(from)?.clone();
        let dom = Space::new(vec![old.clone()])?;
        let cod = Space::new(vec![Subsystem {
            id: to.into(),
            levels: old.levels.clone(),
        }])?;
        let op = LinearOperator::from_columns(&dom, &cod, |l| vec![(l.clone(), C64::new(1.0, 0.0))]);
        self.conjugate_by(&op)
    }
}

fn keep_set(space: &Space, keep: &[&str]) -> Result<BTreeSet<String>> {
    if keep.is_empty() {
        return Err(StateError::EmptyKeep);
    }
    for id in keep {
        space.subsystem(id)?;
    }
    Ok(keep.iter().map(|s| s.to_string()).collect())
}

/// Reduced state of a ket on the `keep` subsystems.
pub fn partial_trace(s: &StateVector, keep: &[&str]) -> Result<DensityMatrix> {
    let keep = keep_set(&s.space, keep)?;
    let kept = s.space.restrict(&keep)?;
    let splitter = Splitter::new(&s.space, &kept);
    let mut groups: BTreeMap<BasisLabel, Vec<(usize, C64)>> = BTreeMap::new();
    for (l, c) in &s.amps {
        let (k, env) = splitter.split(l);
        groups.entry(env).or_default().push((kept.index(&k), *c));
    }
    let n = kept.dim();
    let mut data = DMatrix::zeros(n, n);
    for terms in groups.values() {
        for &(i, ci) in terms {
            for &(j, cj) in terms {
                data[(i, j)] += ci * cj.conj();
            }
        }
    }
    Ok(DensityMatrix { space: kept, data })
}

/// Reduced state of a density matrix on the `keep` subsystems.
pub fn partial_trace_dm(rho: &DensityMatrix, keep: &[&str]) -> Result<DensityMatrix> {
    let keep = keep_set(&rho.space, keep)?;
    let kept = rho.space.restrict(&keep)?;
    let splitter = Splitter::new(&rho.space, &kept);
    let split: Vec<(usize, BasisLabel)> = rho
        .space
        .labels()
        .map(|l| {
            let (k, env) = splitter.split(&l);
            (kept.index(&k), env)
        })
        .collect();
    let n = kept.dim();
    let mut data = DMatrix::zeros(n, n);
    for (r, (kr, er)) in split.iter().enumerate() {
        for (c, (kc, ec)) in split.iter().enumerate() {
            if er == ec {
                data[(*kr, *kc)] += rho.data[(r, c)];
            }
        }
    }
    Ok(DensityMatrix { space: kept, data })
}

/// `⟨target|ρ|target⟩`, clipped to `[0, 1]`.
pub fn fidelity_pure(rho: &DensityMatrix, target: &StateVector) -> Result<f64> {
    if rho.space != target.space {
        return Err(StateError::SpaceMismatch(
            "fidelity target lives on a different space".into(),
        ));
    }
    let n2 = target.norm_sqr();
    if (n2 - 1.0).abs() > 1e-10 {
        return Err(StateError::NotNormalized(n2));
    }
    let v = nalgebra::DVector::from_vec(target.to_dense());
    let f = (v.adjoint() * &rho.data * &v)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}

/// `|⟨a|b⟩|`: state equality up to global phase.
pub fn overlap_modulus(a: &StateVector, b: &StateVector) -> Result<f64> {
    Ok(inner(a, b)?.norm())
}
