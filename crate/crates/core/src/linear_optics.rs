//! Photonic post-processing between the cavities and the detectors.
//!
//! Photon modes are subsystems named `"{path}.{pol}"` whose levels are
//! occupation numbers. A dual-rail polarization qubit on path `A` is one
//! photon shared between `A.H` and `A.V`.
//!
//! Beam splitters are applied in second quantization: a Fock state is
//! written as a polynomial in creation operators, each operator is
//! substituted by its image under the mode map, and the result is read
//! back in the occupation basis. The convention is the symmetric real one,
//! `a†₁ → (a†₃ + a†₄)/√2`, `a†₂ → (a†₃ − a†₄)/√2`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64 as C64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::{
    apply, normalize, BasisLabel, DensityMatrix, LinearOperator, Space, StateError, StateVector,
    Subsystem,
};

pub const PATH_A: &str = "A";
pub const PATH_B: &str = "B";
pub const PATH_3: &str = "3";
pub const PATH_4: &str = "4";

/// Quoted heralding probability for the two-fold coincidence, reported
/// beside the computed one.
pub const REFERENCE_SUCCESS_PROBABILITY: f64 = 0.25;

/// Amplitude tolerated outside the one-photon-per-path sector.
pub const SECTOR_TOL: f64 = 1e-12;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("path `{path}` holds {count} photons in one polarization/circular mode pair")]
    DoubleOccupation { path: String, count: usize },
    #[error("amplitude {amplitude:e} outside the one-photon-per-path sector")]
    OutsideSector { amplitude: f64 },
    #[error("visibility {0} must lie in [0, 1]")]
    Visibility(f64),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, OpticsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pol {
    H,
    V,
}

impl Pol {
    pub fn name(self) -> &'static str {
        match self {
            Pol::H => "H",
            Pol::V => "V",
        }
    }
}

/// One spatial path and polarization.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhotonMode {
    pub path: String,
    pub pol: Pol,
}

impl PhotonMode {
    pub fn new(path: &str, pol: Pol) -> Self {
        Self {
            path: path.to_string(),
            pol,
        }
    }

    pub fn id(&self) -> String {
        mode_id(&self.path, self.pol)
    }
}

pub fn mode_id(path: &str, pol: Pol) -> String {
    format!("{path}.{}", pol.name())
}

/// Space of the two polarization modes of one path, truncated at `max` quanta.
pub fn path_space(path: &str, max: usize) -> Space {
    Space::new(vec![
        Subsystem::mode(mode_id(path, Pol::H), max),
        Subsystem::mode(mode_id(path, Pol::V), max),
    ])
    .expect("distinct ids")
}

/// Dual-rail ket `a|H⟩ + b|V⟩` on `path`.
pub fn polarization_qubit(path: &str, a: C64, b: C64) -> StateVector {
    let s = path_space(path, 1);
    let (h, v) = (mode_id(path, Pol::H), mode_id(path, Pol::V));
    StateVector::from_terms(&s, &[(a, &[(&h, "1"), (&v, "0")]), (b, &[(&h, "0"), (&v, "1")])])
        .expect("occupation levels")
}

/// Quarter-wave plate: the circular cavity modes `{path}.cavL`,
/// `{path}.cavR` become `{path}.H`, `{path}.V`, i.e. `|1,0⟩ → |H⟩`,
/// `|0,1⟩ → |V⟩`, vacuum → vacuum.
pub fn qwp_relabel(s: &StateVector, path: &str) -> Result<StateVector> {
    let (l, r) = (format!("{path}.cavL"), format!("{path}.cavR"));
    let (h, v) = (mode_id(path, Pol::H), mode_id(path, Pol::V));
    let space = s.space();
    let (pl, pr) = (
        space.position(&l).ok_or_else(|| StateError::UnknownSubsystem(l.clone()))?,
        space.position(&r).ok_or_else(|| StateError::UnknownSubsystem(r.clone()))?,
    );
    for (label, c) in s.amplitudes() {
        let count: usize = [pl, pr]
            .iter()
            .map(|&p| space.subsystems()[p].levels[label.0[p] as usize].parse::<usize>().unwrap_or(0))
            .sum();
        if count > 1 && c.norm() > SECTOR_TOL {
            return Err(OpticsError::DoubleOccupation {
                path: path.to_string(),
                count,
            });
        }
    }
    let dom = Space::new(vec![space.subsystem(&l)?.clone(), space.subsystem(&r)?.clone()])?;
    let cod = path_space(path, 1);
    let mut op = LinearOperator::zero(dom, cod);
    op.insert(&[(&h, "0"), (&v, "0")], &[(&l, "0"), (&r, "0")], ONE)?;
    op.insert(&[(&h, "1"), (&v, "0")], &[(&l, "1"), (&r, "0")], ONE)?;
    op.insert(&[(&h, "0"), (&v, "1")], &[(&l, "0"), (&r, "1")], ONE)?;
    Ok(apply(&op, s)?)
}

/// 0° half-wave plate on `path`: `H → H`, `V → −V`.
pub fn hwp0(s: &StateVector, path: &str) -> Result<StateVector> {
    Ok(apply(&hwp0_operator(s.space(), path)?, s)?)
}

fn hwp0_operator(space: &Space, path: &str) -> Result<LinearOperator> {
    let v = mode_id(path, Pol::V);
    let sub = space.subsystem(&v)?.clone();
    let dom = Space::new(vec![sub.clone()])?;
    let op = LinearOperator::from_columns(&dom, &dom, |l| {
        let n: usize = sub.levels[l.0[0] as usize].parse().unwrap_or(0);
        let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
        vec![(l.clone(), C64::new(sign, 0.0))]
    });
    Ok(op)
}

// ---------------------------------------------------------------------------
// Second-quantized mode transformations

/// Polynomial in creation operators: sorted multiset of mode indices →
/// coefficient.
#[derive(Clone, Debug, Default)]
struct FockPoly {
    terms: BTreeMap<Vec<usize>, C64>,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

impl FockPoly {
    /// `Π_j (a†_j)^{n_j} / √(n_j!)` scaled by `c`.
    fn from_occupation(occ: &[usize], c: C64) -> Self {
        let mut mono = Vec::new();
        let mut norm = 1.0;
        for (j, &n) in occ.iter().enumerate() {
            mono.extend(std::iter::repeat_n(j, n));
            norm *= factorial(n);
        }
        let mut terms = BTreeMap::new();
        terms.insert(mono, c / norm.sqrt());
        Self { terms }
    }

    fn add(&mut self, other: &FockPoly) {
        for (m, c) in &other.terms {
            *self.terms.entry(m.clone()).or_default() += c;
        }
    }

    fn transform(&self, map: &[Vec<(usize, C64)>]) -> FockPoly {
        let mut out: BTreeMap<Vec<usize>, C64> = BTreeMap::new();
        for (mono, c) in &self.terms {
            let mut partial: BTreeMap<Vec<usize>, C64> = BTreeMap::new();
            partial.insert(Vec::new(), *c);
            for &j in mono {
                let mut next: BTreeMap<Vec<usize>, C64> = BTreeMap::new();
                for (m, v) in &partial {
                    for &(k, u) in &map[j] {
                        let mut m2 = m.clone();
                        let pos = m2.partition_point(|&x| x <= k);
                        m2.insert(pos, k);
                        *next.entry(m2).or_default() += v * u;
                    }
                }
                partial = next;
            }
            for (m, v) in partial {
                *out.entry(m).or_default() += v;
            }
        }
        out.retain(|_, v| v.norm() > 1e-300);
        FockPoly { terms: out }
    }

    /// Amplitudes in the occupation basis over `n_modes` modes.
    fn occupations(&self, n_modes: usize) -> BTreeMap<Vec<usize>, C64> {
        let mut out = BTreeMap::new();
        for (mono, c) in &self.terms {
            let mut occ = vec![0usize; n_modes];
            for &j in mono {
                occ[j] += 1;
            }
            let w: f64 = occ.iter().map(|&n| factorial(n)).product();
            *out.entry(occ).or_insert(ZERO) += c * w.sqrt();
        }
        out
    }
}

/// Splits a state into `environment label → Fock polynomial` over the
/// listed photon-mode subsystems.
fn to_fock(s: &StateVector, modes: &[String]) -> Result<(Space, BTreeMap<BasisLabel, FockPoly>)> {
    let space = s.space();
    let positions: Vec<usize> = modes
        .iter()
        .map(|m| space.position(m).ok_or_else(|| StateError::UnknownSubsystem(m.clone())))
        .collect::<std::result::Result<_, _>>()?;
    let mode_set: BTreeSet<String> = modes.iter().cloned().collect();
    let env_space = space.without(&mode_set);
    let env_pos: Vec<usize> = env_space.ids().map(|id| space.position(id).unwrap()).collect();
    let mut out: BTreeMap<BasisLabel, FockPoly> = BTreeMap::new();
    for (label, c) in s.amplitudes() {
        let occ: Vec<usize> = positions
            .iter()
            .map(|&p| space.subsystems()[p].levels[label.0[p] as usize].parse::<usize>().unwrap())
            .collect();
        let env = BasisLabel(env_pos.iter().map(|&p| label.0[p]).collect());
        out.entry(env).or_default().add(&FockPoly::from_occupation(&occ, *c));
    }
    Ok((env_space, out))
}

fn occupation_of(space: &Space, label: &BasisLabel, id: &str) -> usize {
    space.level_name(label, id).ok().and_then(|l| l.parse().ok()).unwrap_or(0)
}

/// 50:50 beam splitter mixing paths `in1`, `in2` into `out1`, `out2`,
/// polarization preserved. The output alphabets hold up to the total
/// photon capacity of the inputs so bunched terms are represented.
pub fn beamsplitter(s: &StateVector, in1: &str, in2: &str, out1: &str, out2: &str) -> Result<StateVector> {
    let ins: Vec<String> = [in1, in2]
        .iter()
        .flat_map(|p| [mode_id(p, Pol::H), mode_id(p, Pol::V)])
        .collect();
    let space = s.space();
    let capacity: usize = ins
        .iter()
        .map(|m| space.subsystem(m).map(|sub| sub.dim() - 1))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .iter()
        .sum::<usize>()
        / 2;
    let cap = capacity.max(1) * 2;
    let outs: Vec<String> = [out1, out2]
        .iter()
        .flat_map(|p| [mode_id(p, Pol::H), mode_id(p, Pol::V)])
        .collect();
    // input mode j (in1.H, in1.V, in2.H, in2.V) → output modes
    let r = FRAC_1_SQRT_2;
    let map: Vec<Vec<(usize, C64)>> = vec![
        vec![(0, C64::new(r, 0.0)), (2, C64::new(r, 0.0))],
        vec![(1, C64::new(r, 0.0)), (3, C64::new(r, 0.0))],
        vec![(0, C64::new(r, 0.0)), (2, C64::new(-r, 0.0))],
        vec![(1, C64::new(r, 0.0)), (3, C64::new(-r, 0.0))],
    ];
    let (env_space, polys) = to_fock(s, &ins)?;
    let out_modes = Space::new(outs.iter().map(|id| Subsystem::mode(id.clone(), cap)).collect())?;
    let out_space = env_space.union(&out_modes)?;
    let mut amps: BTreeMap<BasisLabel, C64> = BTreeMap::new();
    for (env, poly) in polys {
        let env_names = env_space.describe(&env);
        for (occ, c) in poly.transform(&map).occupations(4) {
            let occ_names: Vec<String> = occ.iter().map(|n| n.to_string()).collect();
            let mut factors: Vec<(&str, &str)> =
                env_names.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            for (id, n) in outs.iter().zip(&occ_names) {
                factors.push((id.as_str(), n.as_str()));
            }
            *amps.entry(out_space.label(&factors)?).or_default() += c;
        }
    }
    Ok(StateVector::from_map(out_space, amps))
}

// ---------------------------------------------------------------------------
// Symmetric-subspace projection

fn dual_rail_ids() -> [String; 4] {
    [
        mode_id(PATH_A, Pol::H),
        mode_id(PATH_A, Pol::V),
        mode_id(PATH_B, Pol::H),
        mode_id(PATH_B, Pol::V),
    ]
}

/// Dual-rail singlet `(|H⟩_x|V⟩_y − |V⟩_x|H⟩_y)/√2`.
pub fn polarization_singlet(x: &str, y: &str) -> StateVector {
    let s = path_space(x, 1).union(&path_space(y, 1)).expect("distinct paths");
    let (xh, xv, yh, yv) = (mode_id(x, Pol::H), mode_id(x, Pol::V), mode_id(y, Pol::H), mode_id(y, Pol::V));
    StateVector::from_terms(
        &s,
        &[
            (C64::new(FRAC_1_SQRT_2, 0.0), &[(&xh, "1"), (&xv, "0"), (&yh, "0"), (&yv, "1")]),
            (C64::new(-FRAC_1_SQRT_2, 0.0), &[(&xh, "0"), (&xv, "1"), (&yh, "1"), (&yv, "0")]),
        ],
    )
    .expect("occupation levels")
}

/// Projector onto the one-photon-per-path sector of paths A, B.
fn sector_projector() -> LinearOperator {
    let s = path_space(PATH_A, 1).union(&path_space(PATH_B, 1)).expect("distinct");
    let mut op = LinearOperator::zero(s.clone(), s);
    let ids = dual_rail_ids();
    for (pa, pb) in [(Pol::H, Pol::H), (Pol::H, Pol::V), (Pol::V, Pol::H), (Pol::V, Pol::V)] {
        let occ = |p: Pol, q: Pol| if p == q { "1" } else { "0" };
        let l = [
            (ids[0].as_str(), occ(pa, Pol::H)),
            (ids[1].as_str(), occ(pa, Pol::V)),
            (ids[2].as_str(), occ(pb, Pol::H)),
            (ids[3].as_str(), occ(pb, Pol::V)),
        ];
        op.insert(&l, &l, ONE).expect("levels");
    }
    op
}

/// Rename paths A, B to 3, 4 (occupations unchanged).
fn relabel_to_outputs() -> LinearOperator {
    let dom = path_space(PATH_A, 1).union(&path_space(PATH_B, 1)).expect("distinct");
    let cod = path_space(PATH_3, 1).union(&path_space(PATH_4, 1)).expect("distinct");
    // Both spaces order their subsystems A.H, A.V, B.H, B.V / 3.H, 3.V, 4.H, 4.V.
    LinearOperator::from_columns(&dom, &cod, |l| vec![(l.clone(), ONE)])
}

/// `(I − |ψ⁻⟩⟨ψ⁻|)` on the dual-rail qubits A, B followed by the rename
/// A, B → 3, 4. Zero outside the one-photon-per-path sector.
pub fn symmetric_operator() -> LinearOperator {
    let p = sector_projector().sub(&singlet_projector()).expect("same space");
    relabel_to_outputs().compose(&p).expect("compatible")
}

/// `|ψ⁻⟩⟨ψ⁻|` on A, B followed by the rename to 3, 4.
pub fn antisymmetric_operator() -> LinearOperator {
    relabel_to_outputs().compose(&singlet_projector()).expect("compatible")
}

/// `|ψ⁻⟩⟨ψ⁻|` on A, B as `½ (|HV⟩ − |VH⟩)(⟨HV| − ⟨VH|)`, so its entries are exactly `±½`.
fn singlet_projector() -> LinearOperator {
    let s = path_space(PATH_A, 1).union(&path_space(PATH_B, 1)).expect("distinct paths");
    let ids = dual_rail_ids();
    let (ah, av, bh, bv) = (ids[0].as_str(), ids[1].as_str(), ids[2].as_str(), ids[3].as_str());
    let unnormalized = StateVector::from_terms(
        &s,
        &[
            (ONE, &[(ah, "1"), (av, "0"), (bh, "0"), (bv, "1")]),
            (-ONE, &[(ah, "0"), (av, "1"), (bh, "1"), (bv, "0")]),
        ],
    )
    .expect("occupation levels");
    LinearOperator::outer(&unnormalized, &unnormalized).scaled(C64::new(0.5, 0.0))
}

fn check_sector(s: &StateVector) -> Result<()> {
    let ids = dual_rail_ids();
    let space = s.space();
    for id in &ids {
        let sub = space.subsystem(id)?;
        if sub.levels != ["0", "1"] {
            return Err(StateError::SpaceMismatch(format!("`{id}` must be a {{0,1}} mode")).into());
        }
    }
    for (l, c) in s.amplitudes() {
        let na = occupation_of(space, l, &ids[0]) + occupation_of(space, l, &ids[1]);
        let nb = occupation_of(space, l, &ids[2]) + occupation_of(space, l, &ids[3]);
        if (na != 1 || nb != 1) && c.norm() >= SECTOR_TOL {
            return Err(OpticsError::OutsideSector { amplitude: c.norm() });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CoincidenceOutcome {
    /// Normalized heralded state on paths 3, 4 (plus any spectators);
    /// `None` when the projection vanishes.
    pub projected_state: Option<StateVector>,
    pub probability: f64,
    /// Unnormalized projection.
    pub raw: StateVector,
}

/// Coincidence-conditioned projection onto the symmetric polarization
/// subspace of the photons on paths A and B.
pub fn symmetric_project(s: &StateVector) -> Result<CoincidenceOutcome> {
    check_sector(s)?;
    let raw = apply(&symmetric_operator(), s)?;
    let probability = raw.norm_sqr();
    let projected_state = match normalize(&raw) {
        Ok((n, _)) => Some(n),
        Err(StateError::DegenerateBranch { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let probability = if projected_state.is_some() { probability } else { 0.0 };
    Ok(CoincidenceOutcome {
        projected_state,
        probability,
        raw,
    })
}

/// Heralded (unnormalized) state when the two photons overlap in time with
/// mode visibility `v = |⟨f_A|f_B⟩|²`:
/// `(1+v)/2 · P_s ρ P_s + (1−v)/2 · P_a ρ P_a`, paths renamed to 3, 4.
/// At `v = 1` this is the ideal symmetric projection.
pub fn herald_with_visibility(rho: &DensityMatrix, visibility: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(OpticsError::Visibility(visibility));
    }
    let sym = rho.conjugate_by(&symmetric_operator())?;
    let anti = rho.conjugate_by(&antisymmetric_operator())?;
    Ok(sym
        .scaled(0.5 * (1.0 + visibility))
        .add(&anti.scaled(0.5 * (1.0 - visibility)))?)
}

// ---------------------------------------------------------------------------
// Detection bookkeeping

/// Detector order in [`DetectorPattern::counts`]: the two detectors behind
/// the splitter on BS1 output 2, then the two behind output 1.
pub const DETECTORS: [&str; 4] = ["D1", "D2", "D1'", "D2'"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorPattern {
    /// Photon number arriving at each of [`DETECTORS`].
    pub counts: [u8; 4],
    pub probability: f64,
}

impl DetectorPattern {
    pub fn is_coincidence(&self) -> bool {
        matches!(self.counts, [1, 1, 0, 0] | [0, 0, 1, 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceBreakdown {
    /// Algebraic weight `⟨P_sym⟩` of the photon pair.
    pub p_symmetric: f64,
    /// Both photons leave BS1 through output 1 / output 2 / different outputs.
    pub p_bunch_mode1: f64,
    pub p_bunch_mode2: f64,
    pub p_antibunch: f64,
    /// Two-fold coincidence `D1 ∧ D2` (output 2) and `D1' ∧ D2'` (output 1).
    pub p_coinc_mode2: f64,
    pub p_coinc_mode1: f64,
    /// Total heralding probability, both outputs.
    pub p_operational: f64,
    pub p_reference: f64,
    pub visibility: f64,
    pub patterns: Vec<DetectorPattern>,
}

impl CoincidenceBreakdown {
    pub fn summary(&self) -> String {
        format!(
            "P_sym = {}; BS1 bunching: out1 {} + out2 {} (antibunch {}); \
             coincidence D1^D2 {} + D1'^D2' {} = {}; reference value {}",
            crate::report::fmt_sig(self.p_symmetric),
            crate::report::fmt_sig(self.p_bunch_mode1),
            crate::report::fmt_sig(self.p_bunch_mode2),
            crate::report::fmt_sig(self.p_antibunch),
            crate::report::fmt_sig(self.p_coinc_mode2),
            crate::report::fmt_sig(self.p_coinc_mode1),
            crate::report::fmt_sig(self.p_operational),
            crate::report::fmt_sig(self.p_reference),
        )
    }
}

/// Full second-quantized bookkeeping for a pure two-photon input on paths
/// A, B: BS1 (A, B → 1, 2), then a 50:50 splitter on each output onto a
/// detector pair. Detectors do not resolve polarization.
pub fn coincidence_probability_detailed(s: &StateVector) -> Result<CoincidenceBreakdown> {
    coincidence_bookkeeping(&[(1.0, s.clone())], 1.0)
}

/// Same bookkeeping for a weighted ensemble of pure inputs, with the B
/// photon's temporal mode overlapping A's with visibility `v`. The
/// temporal degree of freedom is carried as an extra mode label that the
/// detectors do not resolve.
pub fn coincidence_bookkeeping(components: &[(f64, StateVector)], visibility: f64) -> Result<CoincidenceBreakdown> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(OpticsError::Visibility(visibility));
    }
    let ids = dual_rail_ids();
    // Input modes: A.H, A.V, B.H, B.V in temporal mode 0.
    // Stage modes: index = ((port * 2) + pol) * 2 + tmode.
    let (same, orth) = (visibility.sqrt(), (1.0 - visibility).sqrt());
    let r = FRAC_1_SQRT_2;
    let idx = |port: usize, pol: usize, t: usize| (port * 2 + pol) * 2 + t;
    // After BS1, ports 0 = output 1, 1 = output 2.
    let bs1: Vec<Vec<(usize, C64)>> = (0..4)
        .map(|j| {
            let (path, pol) = (j / 2, j % 2);
            let sign = if path == 0 { 1.0 } else { -1.0 };
            let temporal: Vec<(usize, f64)> = if path == 0 { vec![(0, 1.0)] } else { vec![(0, same), (1, orth)] };
            let mut out = Vec::new();
            for (t, w) in temporal {
                if w == 0.0 {
                    continue;
                }
                out.push((idx(0, pol, t), C64::new(r * w, 0.0)));
                out.push((idx(1, pol, t), C64::new(sign * r * w, 0.0)));
            }
            out
        })
        .collect();
    // Detector splitters: output 2 → D1 (port 0), D2 (port 1);
    // output 1 → D1' (port 2), D2' (port 3).
    let det: Vec<Vec<(usize, C64)>> = (0..8)
        .map(|m| {
            let (port, rest) = (m / 4, m % 4);
            let (pol, t) = (rest / 2, rest % 2);
            let (d1, d2) = if port == 1 { (0, 1) } else { (2, 3) };
            vec![
                (idx(d1, pol, t), C64::new(r, 0.0)),
                (idx(d2, pol, t), C64::new(r, 0.0)),
            ]
        })
        .collect();
    // the other input of each detector splitter is vacuum

    let mut p_symmetric = 0.0;
    let mut bunch = [0.0f64; 3];
    let mut patterns: BTreeMap<[u8; 4], f64> = BTreeMap::new();
    let sym = symmetric_operator();
    for (w, s) in components {
        check_sector(s)?;
        p_symmetric += w * apply(&sym, s)?.norm_sqr();
        let (_, polys) = to_fock(s, &ids)?;
        for poly in polys.values() {
            let after_bs1 = poly.transform(&bs1);
            for (occ, c) in after_bs1.occupations(8) {
                let n1: usize = occ[..4].iter().sum();
                let n2: usize = occ[4..].iter().sum();
                let p = w * c.norm_sqr();
                match (n1, n2) {
                    (2, 0) => bunch[0] += p,
                    (0, 2) => bunch[1] += p,
                    _ => bunch[2] += p,
                }
            }
            for (occ, c) in after_bs1.transform(&det).occupations(16) {
                let mut counts = [0u8; 4];
                for (m, n) in occ.iter().enumerate() {
                    counts[m / 4] += *n as u8;
                }
                *patterns.entry(counts).or_default() += w * c.norm_sqr();
            }
        }
    }
    let patterns: Vec<DetectorPattern> = patterns
        .into_iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(counts, probability)| DetectorPattern { counts, probability })
        .collect();
    let p_coinc_mode2 = patterns.iter().filter(|d| d.counts == [1, 1, 0, 0]).map(|d| d.probability).sum();
    let p_coinc_mode1 = patterns.iter().filter(|d| d.counts == [0, 0, 1, 1]).map(|d| d.probability).sum::<f64>();
    Ok(CoincidenceBreakdown {
        p_symmetric,
        p_bunch_mode1: bunch[0],
        p_bunch_mode2: bunch[1],
        p_antibunch: bunch[2],
        p_coinc_mode2,
        p_coinc_mode1,
        p_operational: p_coinc_mode1 + p_coinc_mode2,
        p_reference: REFERENCE_SUCCESS_PROBABILITY,
        visibility,
        patterns,
    })
}

/// Monte Carlo estimate of a probability with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    pub hits: u64,
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_counts(hits: u64, trials: u64) -> Self {
        let mean = hits as f64 / trials as f64;
        Self {
            trials,
            hits,
            mean,
            std_err: (mean * (1.0 - mean) / trials as f64).sqrt(),
        }
    }
}

/// Samples detector patterns from the Born distribution (ChaCha8, `seed`)
/// and counts two-fold coincidences.
pub fn sample_coincidences(b: &CoincidenceBreakdown, trials: u64, seed: u64) -> McEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = b.patterns.iter().map(|p| p.probability).collect();
    let total: f64 = weights.iter().sum();
    let Ok(dist) = WeightedIndex::new(&weights) else {
        return McEstimate::from_counts(0, trials.max(1));
    };
    let mut hits = 0;
    for _ in 0..trials {
        // the pattern weights may sum to slightly under one (lost norm)
        if b.patterns[dist.sample(&mut rng)].is_coincidence() {
            hits += 1;
        }
    }
    let mut est = McEstimate::from_counts(hits, trials);
    est.mean *= total;
    est.std_err *= total;
    est
}
