//! Atom–cavity dynamics for the two nodes.
//!
//! Alice's atom has ground levels `g_L`, `g_R`, `g_0` and excited levels
//! `e_L`, `e_R`; the laser drives `g_{L,R} → e_{L,R}` and the two circular
//! cavity modes couple `e_{L,R} ↔ g_0`. Bob's atom starts in `g0p` (the
//! auxiliary ground level), the laser drives `g0p → e_0`, and `e_0` decays
//! into `g_L` (emitting a right-circular photon) or `g_R` (left-circular).
//!
//! Cavity leakage is modeled by the non-Hermitian term `−i(κ/2) n̂` and
//! spontaneous emission by `−iγ/2` on the excited levels. Norm lost through
//! `κ` is the emitted photon; norm lost through `γ` is discarded.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qstate::{
    tensor, DensityMatrix, LinearOperator, Space, StateError, StateVector, Subsystem,
};

pub const ALICE_ATOM: &str = "A.atom";
pub const ALICE_CAV_L: &str = "A.cavL";
pub const ALICE_CAV_R: &str = "A.cavR";
pub const BOB_ATOM: &str = "B.atom";
pub const BOB_CAV_L: &str = "B.cavL";
pub const BOB_CAV_R: &str = "B.cavR";

pub const ALICE_LEVELS: [&str; 5] = ["g_L", "g_R", "g_0", "e_L", "e_R"];
pub const BOB_LEVELS: [&str; 4] = ["g0p", "e_0", "g_L", "g_R"];

/// Excited-state population above which a run is flagged non-adiabatic.
pub const EXCITED_POP_WARN: f64 = 1e-2;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("parameters belong to {found:?}, operation needs {expected:?}")]
    WrongSide { expected: Side, found: Side },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("output step {dt} exceeds t_total/1000 = {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("norm grew from {before} to {after} at t = {t} (integrator fault)")]
    NormIncrease { t: f64, before: f64, after: f64 },
    #[error("coupling modulation depth {0} must lie in [0, 1)")]
    ModulationDepth(f64),
    #[error("pulse shape has zero norm")]
    ZeroNorm,
    #[error("sample grids differ")]
    GridMismatch,
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Alice,
    Bob,
}

/// `g(t) = g·(1 + ε sin(νt))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingModulation {
    pub epsilon: f64,
    pub nu: f64,
}

/// Rates in units of a reference coupling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub side: Side,
    pub delta: f64,
    pub gamma: f64,
    pub g: f64,
    pub kappa: f64,
    #[serde(default)]
    pub modulation: Option<CouplingModulation>,
}

impl SystemParams {
    pub fn new(side: Side) -> Self {
        Self {
            side,
            delta: 0.0,
            gamma: 0.1,
            g: 1.0,
            kappa: 0.3,
            modulation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.delta, self.gamma, self.g, self.kappa]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(DynamicsError::InvalidParams("rates must be finite".into()));
        }
        if self.gamma < 0.0 || self.kappa < 0.0 {
            return Err(DynamicsError::InvalidParams("gamma and kappa must be >= 0".into()));
        }
        if self.g <= 0.0 {
            return Err(DynamicsError::InvalidParams("g must be > 0".into()));
        }
        if let Some(m) = self.modulation {
            if !(0.0..1.0).contains(&m.epsilon) {
                return Err(DynamicsError::ModulationDepth(m.epsilon));
            }
            if !m.nu.is_finite() {
                return Err(DynamicsError::InvalidParams("modulation nu must be finite".into()));
            }
        }
        Ok(())
    }

    /// Instantaneous vacuum Rabi coupling.
    pub fn coupling_at(&self, t: f64) -> f64 {
        match self.modulation {
            Some(m) => self.g * (1.0 + m.epsilon * (m.nu * t).sin()),
            None => self.g,
        }
    }

    fn peak_coupling(&self) -> f64 {
        self.g * (1.0 + self.modulation.map_or(0.0, |m| m.epsilon))
    }

    fn expect_side(&self, side: Side) -> Result<()> {
        if self.side != side {
            return Err(DynamicsError::WrongSide {
                expected: side,
                found: self.side,
            });
        }
        Ok(())
    }
}

/// Attach a time-varying coupling `g(t) = g(1 + ε sin νt)`.
pub fn coupling_modulation(p: &SystemParams, epsilon: f64, nu: f64) -> Result<SystemParams> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(DynamicsError::ModulationDepth(epsilon));
    }
    let mut out = *p;
    out.modulation = Some(CouplingModulation { epsilon, nu });
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseShape {
    SinSquaredRamp,
    TanhRamp,
    Linear,
}

/// Monotone ramp of the pump Rabi frequency from 0 to `omega_max` over
/// `t_total·(1 − hold_fraction)`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub shape: PulseShape,
    pub omega_max: f64,
    pub t_total: f64,
    pub hold_fraction: f64,
}

const TANH_STEEPNESS: f64 = 3.0;

impl PulseSchedule {
    pub fn new(omega_max: f64, t_total: f64) -> Self {
        Self {
            shape: PulseShape::SinSquaredRamp,
            omega_max,
            t_total,
            hold_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return Err(DynamicsError::InvalidParams("omega_max must be > 0".into()));
        }
        if !(self.t_total > 0.0 && self.t_total.is_finite()) {
            return Err(DynamicsError::InvalidParams("t_total must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.hold_fraction) {
            return Err(DynamicsError::InvalidParams("hold_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn t_ramp(&self) -> f64 {
        self.t_total * (1.0 - self.hold_fraction)
    }

    pub fn omega(&self, t: f64) -> f64 {
        let tr = self.t_ramp();
        if t <= 0.0 {
            return 0.0;
        }
        if t >= tr {
            return self.omega_max;
        }
        let s = t / tr;
        let shape = match self.shape {
            PulseShape::SinSquaredRamp => (0.5 * PI * s).sin().powi(2),
            PulseShape::TanhRamp => (TANH_STEEPNESS * s).tanh() / TANH_STEEPNESS.tanh(),
            PulseShape::Linear => s,
        };
        self.omega_max * shape
    }
}

/// Mixing angle θ in `[0, π/2]`: `tan θ = Ω/g` for Alice, `Ω/(√2 g)` for Bob.
pub fn mixing_angle(side: Side, g: f64, omega: f64) -> f64 {
    match side {
        Side::Alice => omega.atan2(g),
        Side::Bob => omega.atan2(SQRT_2 * g),
    }
}

pub fn mixing_angle_at(p: &SystemParams, omega: &PulseSchedule, t: f64) -> f64 {
    mixing_angle(p.side, p.coupling_at(t), omega.omega(t))
}

pub fn alice_space() -> Space {
    Space::new(vec![
        Subsystem::new(ALICE_ATOM, &ALICE_LEVELS),
        Subsystem::mode(ALICE_CAV_L, 1),
        Subsystem::mode(ALICE_CAV_R, 1),
    ])
    .expect("distinct ids")
}

pub fn bob_space() -> Space {
    Space::new(vec![
        Subsystem::new(BOB_ATOM, &BOB_LEVELS),
        Subsystem::mode(BOB_CAV_L, 1),
        Subsystem::mode(BOB_CAV_R, 1),
    ])
    .expect("distinct ids")
}

pub fn side_space(side: Side) -> Space {
    match side {
        Side::Alice => alice_space(),
        Side::Bob => bob_space(),
    }
}

fn side_ids(side: Side) -> (&'static str, &'static str, &'static str) {
    match side {
        Side::Alice => (ALICE_ATOM, ALICE_CAV_L, ALICE_CAV_R),
        Side::Bob => (BOB_ATOM, BOB_CAV_L, BOB_CAV_R),
    }
}

fn excited_levels(side: Side) -> &'static [&'static str] {
    match side {
        Side::Alice => &["e_L", "e_R"],
        Side::Bob => &["e_0"],
    }
}

/// Time-independent pieces of a node Hamiltonian:
/// `H(t) = bare + Ω(t)·drive + g(t)·cavity`.
#[derive(Clone, Debug)]
pub struct HamiltonianParts {
    pub space: Space,
    /// `−(Δ + iγ/2)` on the excited levels.
    pub bare: LinearOperator,
    /// Pump transitions plus Hermitian conjugate, unit amplitude.
    pub drive: LinearOperator,
    /// Atom–cavity transitions plus Hermitian conjugate, unit coupling.
    pub cavity: LinearOperator,
}

impl HamiltonianParts {
    pub fn at(&self, t: f64, p: &SystemParams, omega: &PulseSchedule) -> LinearOperator {
        self.bare
            .add(&self.drive.scaled(C64::new(omega.omega(t), 0.0)))
            .and_then(|h| h.add(&self.cavity.scaled(C64::new(p.coupling_at(t), 0.0))))
            .expect("same space")
    }
}

/// Adds `v·|to⟩⟨from|` and its conjugate transpose.
fn hop(
    op: &mut LinearOperator,
    to: &[(&str, &str)],
    from: &[(&str, &str)],
    v: C64,
) -> std::result::Result<(), StateError> {
    op.insert(to, from, v)?;
    op.insert(from, to, v.conj())
}

pub fn hamiltonian_parts(p: &SystemParams) -> Result<HamiltonianParts> {
    p.validate()?;
    let (atom, cl, cr) = side_ids(p.side);
    let space = side_space(p.side);
    let mut bare = LinearOperator::zero(space.clone(), space.clone());
    let mut drive = bare.clone();
    let mut cavity = bare.clone();
    let diag = -C64::new(p.delta, p.gamma / 2.0);
    let occupations = [("0", "0"), ("1", "0"), ("0", "1"), ("1", "1")];
    for (nl, nr) in occupations {
        for e in excited_levels(p.side) {
            let l = [(atom, *e), (cl, nl), (cr, nr)];
            bare.insert(&l, &l, diag)?;
        }
        match p.side {
            Side::Alice => {
                hop(&mut drive, &[(atom, "e_L"), (cl, nl), (cr, nr)], &[(atom, "g_L"), (cl, nl), (cr, nr)], ONE)?;
                hop(&mut drive, &[(atom, "e_R"), (cl, nl), (cr, nr)], &[(atom, "g_R"), (cl, nl), (cr, nr)], ONE)?;
            }
            Side::Bob => {
                hop(&mut drive, &[(atom, "e_0"), (cl, nl), (cr, nr)], &[(atom, "g0p"), (cl, nl), (cr, nr)], ONE)?;
            }
        }
    }
    // One quantum in the coupled mode; the other mode is a spectator.
    for spectator in ["0", "1"] {
        match p.side {
            Side::Alice => {
                // a_L |e_L⟩⟨g_0| : |g_0; 1, n_R⟩ → |e_L; 0, n_R⟩
                hop(&mut cavity, &[(atom, "e_L"), (cl, "0"), (cr, spectator)], &[(atom, "g_0"), (cl, "1"), (cr, spectator)], ONE)?;
                hop(&mut cavity, &[(atom, "e_R"), (cl, spectator), (cr, "0")], &[(atom, "g_0"), (cl, spectator), (cr, "1")], ONE)?;
            }
            Side::Bob => {
                // a_R |e_0⟩⟨g_L| and a_L |e_0⟩⟨g_R|
                hop(&mut cavity, &[(atom, "e_0"), (cl, spectator), (cr, "0")], &[(atom, "g_L"), (cl, spectator), (cr, "1")], ONE)?;
                hop(&mut cavity, &[(atom, "e_0"), (cl, "0"), (cr, spectator)], &[(atom, "g_R"), (cl, "1"), (cr, spectator)], ONE)?;
            }
        }
    }
    Ok(HamiltonianParts {
        space,
        bare,
        drive,
        cavity,
    })
}

/// Alice's rotating-frame Hamiltonian at time `t` (no cavity decay term).
pub fn hamiltonian_alice(t: f64, p: &SystemParams, omega: &PulseSchedule) -> Result<LinearOperator> {
    p.expect_side(Side::Alice)?;
    Ok(hamiltonian_parts(p)?.at(t, p, omega))
}

/// Bob's rotating-frame Hamiltonian at time `t` (no cavity decay term).
pub fn hamiltonian_bob(t: f64, p: &SystemParams, omega: &PulseSchedule) -> Result<LinearOperator> {
    p.expect_side(Side::Bob)?;
    Ok(hamiltonian_parts(p)?.at(t, p, omega))
}

/// Instantaneous dark states: two for Alice (`D₁`, `D₂`), one for Bob.
pub fn dark_states(p: &SystemParams, omega: &PulseSchedule, t: f64) -> Vec<StateVector> {
    dark_states_at_angle(p.side, mixing_angle_at(p, omega, t))
}

pub fn dark_states_at_angle(side: Side, theta: f64) -> Vec<StateVector> {
    let (c, s) = (theta.cos(), theta.sin());
    let (atom, cl, cr) = side_ids(side);
    let space = side_space(side);
    let re = |x: f64| C64::new(x, 0.0);
    match side {
        Side::Alice => vec![
            StateVector::from_terms(
                &space,
                &[
                    (re(c), &[(atom, "g_L"), (cl, "0"), (cr, "0")]),
                    (re(-s), &[(atom, "g_0"), (cl, "1"), (cr, "0")]),
                ],
            )
            .expect("alice levels"),
            StateVector::from_terms(
                &space,
                &[
                    (re(c), &[(atom, "g_R"), (cl, "0"), (cr, "0")]),
                    (re(-s), &[(atom, "g_0"), (cl, "0"), (cr, "1")]),
                ],
            )
            .expect("alice levels"),
        ],
        Side::Bob => vec![StateVector::from_terms(
            &space,
            &[
                (re(c), &[(atom, "g0p"), (cl, "0"), (cr, "0")]),
                (re(-s * FRAC_1_SQRT_2), &[(atom, "g_L"), (cl, "0"), (cr, "1")]),
                (re(-s * FRAC_1_SQRT_2), &[(atom, "g_R"), (cl, "1"), (cr, "0")]),
            ],
        )
        .expect("bob levels")],
    }
}

/// Alice's initial state `(a|g_L⟩ + b|g_R⟩)|0,0⟩`.
pub fn alice_initial(a: C64, b: C64) -> StateVector {
    let atom = Space::new(vec![Subsystem::new(ALICE_ATOM, &ALICE_LEVELS)]).expect("one subsystem");
    let q = StateVector::from_terms(&atom, &[(a, &[(ALICE_ATOM, "g_L")]), (b, &[(ALICE_ATOM, "g_R")])])
        .expect("alice levels");
    tensor(&q, &vacuum(ALICE_CAV_L, ALICE_CAV_R)).expect("disjoint")
}

/// Bob's initial state `|g0p⟩|0,0⟩`.
pub fn bob_initial() -> StateVector {
    StateVector::basis(&bob_space(), &[(BOB_ATOM, "g0p"), (BOB_CAV_L, "0"), (BOB_CAV_R, "0")])
        .expect("bob levels")
}

fn vacuum(l: &str, r: &str) -> StateVector {
    let cav = Space::new(vec![Subsystem::mode(l, 1), Subsystem::mode(r, 1)]).expect("distinct");
    StateVector::basis(&cav, &[(l, "0"), (r, "0")]).expect("vacuum")
}

/// The dark-state superposition the adiabatic theorem predicts at time `t`
/// for Alice's input `a|g_L⟩ + b|g_R⟩`, or Bob's single dark state.
pub fn adiabatic_target(p: &SystemParams, omega: &PulseSchedule, t: f64, a: C64, b: C64) -> StateVector {
    let d = dark_states(p, omega, t);
    match p.side {
        Side::Alice => d[0].scaled(a).add(&d[1].scaled(b)).expect("same space"),
        Side::Bob => d[0].clone(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DynamicsReport {
    pub side: Side,
    /// Unemitted remainder at `t_total` (sub-normalized).
    #[serde(serialize_with = "crate::report::serialize_state")]
    pub final_state: StateVector,
    pub emission_prob: f64,
    pub spont_loss: f64,
    pub residual_norm_sqr: f64,
    pub excited_pop_max: f64,
    pub adiabaticity_warning: bool,
    /// Integration step actually used.
    pub step: f64,
    /// Sample times of the recorded pulse.
    pub times: Vec<f64>,
    /// Emitted-photon amplitude density on `times`.
    #[serde(serialize_with = "crate::report::serialize_complex_vec")]
    pub pulse_shape: Vec<C64>,
    /// State of (atom, outgoing photon) left behind by the emission,
    /// unnormalized (trace = emission probability). The photon is labeled
    /// by the cavity mode it leaked from.
    #[serde(serialize_with = "crate::report::serialize_density")]
    pub emitted: DensityMatrix,
}

impl DynamicsReport {
    /// `emission + spontaneous loss + residual norm² − 1`.
    pub fn closure_error(&self) -> f64 {
        self.emission_prob + self.spont_loss + self.residual_norm_sqr - 1.0
    }
}

type Triplets = Vec<(usize, usize, C64)>;

fn triplets(op: &LinearOperator) -> Triplets {
    op.entries()
        .iter()
        .map(|((o, i), v)| (op.codomain().index(o), op.domain().index(i), *v))
        .collect()
}

fn matvec_acc(m: &Triplets, scale: C64, x: &[C64], y: &mut [C64]) {
    for &(r, c, v) in m {
        y[r] += scale * v * x[c];
    }
}

struct Rhs {
    bare: Triplets,
    drive: Triplets,
    cavity: Triplets,
    photon_weight: Vec<f64>,
    excited: Vec<bool>,
    branches: Vec<usize>,
    kappa: f64,
    gamma: f64,
}

/// Augmented state: wavefunction, emitted probability, spontaneous loss,
/// and the emitted-branch coherence matrix.
#[derive(Clone)]
struct Aug {
    psi: Vec<C64>,
    emitted: f64,
    spont: f64,
    coh: Vec<C64>,
}

impl Aug {
    fn axpy(&self, h: f64, k: &Aug) -> Aug {
        Aug {
            psi: self.psi.iter().zip(&k.psi).map(|(a, b)| a + b * h).collect(),
            emitted: self.emitted + h * k.emitted,
            spont: self.spont + h * k.spont,
            coh: self.coh.iter().zip(&k.coh).map(|(a, b)| a + b * h).collect(),
        }
    }
}

impl Rhs {
    fn eval(&self, omega_t: f64, g_t: f64, y: &Aug) -> Aug {
        let n = y.psi.len();
        let mut hpsi = vec![ZERO; n];
        matvec_acc(&self.bare, ONE, &y.psi, &mut hpsi);
        matvec_acc(&self.drive, C64::new(omega_t, 0.0), &y.psi, &mut hpsi);
        matvec_acc(&self.cavity, C64::new(g_t, 0.0), &y.psi, &mut hpsi);
        let mut dpsi = vec![ZERO; n];
        let mut emitted = 0.0;
        let mut spont = 0.0;
        for j in 0..n {
            let decay = C64::new(0.0, -0.5 * self.kappa * self.photon_weight[j]);
            // d/dt ψ = −i (H − iκ n̂/2) ψ
            dpsi[j] = C64::new(0.0, -1.0) * (hpsi[j] + decay * y.psi[j]);
            let p = y.psi[j].norm_sqr();
            emitted += self.kappa * self.photon_weight[j] * p;
            if self.excited[j] {
                spont += self.gamma * p;
            }
        }
        let nb = self.branches.len();
        let mut coh = vec![ZERO; nb * nb];
        for (k, &bk) in self.branches.iter().enumerate() {
            for (l, &bl) in self.branches.iter().enumerate() {
                coh[k * nb + l] = y.psi[bk] * y.psi[bl].conj() * self.kappa;
            }
        }
        Aug {
            psi: dpsi,
            emitted,
            spont,
            coh,
        }
    }
}

/// Integrate `i dψ/dt = (H(t) − iκ n̂/2) ψ` from 0 to `t_total` with
/// fixed-step RK4. `dt` is the sampling interval of the recorded pulse
/// shape; the integration step is `min(dt, 1/(50·max(g, Ω_max, κ, |Δ|)))`
/// rounded down so that it divides `dt`.
pub fn evolve(initial: &StateVector, p: &SystemParams, omega: &PulseSchedule, dt: f64) -> Result<DynamicsReport> {
    p.validate()?;
    omega.validate()?;
    let parts = hamiltonian_parts(p)?;
    let space = parts.space.clone();
    if initial.space() != &space {
        return Err(StateError::SpaceMismatch("initial state is not on this node's space".into()).into());
    }
    let n2 = initial.norm_sqr();
    if (n2 - 1.0).abs() > 1e-10 {
        return Err(StateError::NotNormalized(n2).into());
    }
    let limit = omega.t_total / 1000.0;
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(DynamicsError::StepTooLarge { dt, limit });
    }

    let rate = p.peak_coupling().max(omega.omega_max).max(p.kappa).max(p.delta.abs());
    let h_max = 1.0 / (50.0 * rate);
    let n_rec = (omega.t_total / dt - 1e-9).ceil().max(1.0) as usize;
    let rec_dt = omega.t_total / n_rec as f64;
    let sub = (rec_dt / h_max - 1e-9).ceil().max(1.0) as usize;
    let h = rec_dt / sub as f64;

    let (atom, cl, cr) = side_ids(p.side);
    let labels: Vec<_> = space.labels().collect();
    let photons: Vec<usize> = labels
        .iter()
        .map(|l| {
            let n = |id| space.level_name(l, id).unwrap().parse::<usize>().unwrap();
            n(cl) + n(cr)
        })
        .collect();
    let excited_names = excited_levels(p.side);
    let excited: Vec<bool> = labels
        .iter()
        .map(|l| excited_names.contains(&space.level_name(l, atom).unwrap()))
        .collect();
    let branches: Vec<usize> = (0..labels.len()).filter(|&j| photons[j] == 1).collect();
    let nb = branches.len();

    let rhs = Rhs {
        bare: triplets(&parts.bare),
        drive: triplets(&parts.drive),
        cavity: triplets(&parts.cavity),
        photon_weight: photons.iter().map(|&n| n as f64).collect(),
        excited,
        branches: branches.clone(),
        kappa: p.kappa,
        gamma: p.gamma,
    };

    let mut y = Aug {
        psi: initial.to_dense(),
        emitted: 0.0,
        spont: 0.0,
        coh: vec![ZERO; nb * nb],
    };
    let sqrt_kappa = p.kappa.sqrt();
    let excited_pop = |psi: &[C64]| -> f64 {
        psi.iter()
            .zip(&rhs.excited)
            .filter(|(_, &e)| e)
            .map(|(c, _)| c.norm_sqr())
            .sum()
    };
    let mut times = Vec::with_capacity(n_rec + 1);
    let mut branch_amps: Vec<Vec<C64>> = Vec::with_capacity(n_rec + 1);
    let record = |t: f64, y: &Aug, times: &mut Vec<f64>, amps: &mut Vec<Vec<C64>>| {
        times.push(t);
        amps.push(branches.iter().map(|&j| y.psi[j] * sqrt_kappa).collect());
    };
    record(0.0, &y, &mut times, &mut branch_amps);
    let mut excited_pop_max = excited_pop(&y.psi);
    let mut norm = n2;

    let drive_at = |t: f64| (omega.omega(t), p.coupling_at(t));
    for k in 0..n_rec {
        for s in 0..sub {
            let t = k as f64 * rec_dt + s as f64 * h;
            let (o0, g0) = drive_at(t);
            let (o1, g1) = drive_at(t + 0.5 * h);
            let (o2, g2) = drive_at(t + h);
            let k1 = rhs.eval(o0, g0, &y);
            let k2 = rhs.eval(o1, g1, &y.axpy(0.5 * h, &k1));
            let k3 = rhs.eval(o1, g1, &y.axpy(0.5 * h, &k2));
            let k4 = rhs.eval(o2, g2, &y.axpy(h, &k3));
            let mut next = y.axpy(h / 6.0, &k1);
            next = next.axpy(h / 3.0, &k2);
            next = next.axpy(h / 3.0, &k3);
            next = next.axpy(h / 6.0, &k4);
            y = next;
            let new_norm: f64 = y.psi.iter().map(|c| c.norm_sqr()).sum();
            if new_norm > norm + 1e-10 {
                return Err(DynamicsError::NormIncrease {
                    t: t + h,
                    before: norm,
                    after: new_norm,
                });
            }
            norm = new_norm;
            excited_pop_max = excited_pop_max.max(excited_pop(&y.psi));
        }
        record((k + 1) as f64 * rec_dt, &y, &mut times, &mut branch_amps);
    }

    let adiabaticity_warning = excited_pop_max > EXCITED_POP_WARN;
    if adiabaticity_warning {
        warn!(
            "{:?}: excited-state population reached {:.3e} (threshold {:.0e})",
            p.side, excited_pop_max, EXCITED_POP_WARN
        );
    }

    let mut emitted = DMatrix::zeros(space.dim(), space.dim());
    for (k, &bk) in branches.iter().enumerate() {
        for (l, &bl) in branches.iter().enumerate() {
            emitted[(bk, bl)] = y.coh[k * nb + l];
        }
    }
    let dominant = (0..nb)
        .max_by(|&a, &b| y.coh[a * nb + a].re.total_cmp(&y.coh[b * nb + b].re))
        .unwrap_or(0);
    let pulse_shape = branch_amps
        .iter()
        .map(|amps| {
            let mag = amps.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            match amps.get(dominant) {
                Some(c) if c.norm() > 0.0 => c / c.norm() * mag,
                _ => C64::new(mag, 0.0),
            }
        })
        .collect();

    Ok(DynamicsReport {
        side: p.side,
        final_state: StateVector::from_dense(&space, &y.psi),
        emission_prob: y.emitted,
        spont_loss: y.spont,
        residual_norm_sqr: norm,
        excited_pop_max,
        adiabaticity_warning,
        step: h,
        times,
        pulse_shape,
        emitted: DensityMatrix::from_matrix(space, emitted),
    })
}

// 8-point Gauss–Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
    let mut acc = 0.0;
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        acc += w * (f(m - r * x) + f(m + r * x));
    }
    acc * r
}

/// `∫_a^b f` by composite 8-point Gauss–Legendre on panels no wider than `panel`.
pub fn integrate_fn<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panel: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = ((b - a) / panel).ceil().max(1.0) as usize;
    let w = (b - a) / n as f64;
    (0..n).map(|i| gauss_legendre(&f, a + i as f64 * w, a + (i + 1) as f64 * w)).sum()
}

/// Adiabatic single-photon pulse shape
/// `f(t) = √κ sin θ(t) exp(−(κ/2) ∫₀ᵗ sin²θ)` sampled on `grid`.
pub fn pulse_shape_analytic(p: &SystemParams, omega: &PulseSchedule, grid: &[f64]) -> Result<Vec<f64>> {
    p.validate()?;
    pulse_shape_from_angle(p.kappa, |t| mixing_angle_at(p, omega, t), grid)
}

/// Same formula for an arbitrary mixing-angle history `theta(t)`.
pub fn pulse_shape_from_angle<F: Fn(f64) -> f64>(kappa: f64, theta: F, grid: &[f64]) -> Result<Vec<f64>> {
    check_grid(grid)?;
    let sin2 = |t: f64| theta(t).sin().powi(2);
    let mut acc = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        acc += integrate_fn(sin2, prev, t, 0.25);
        prev = t;
        out.push(kappa.sqrt() * theta(t).sin() * (-0.5 * kappa * acc).exp());
    }
    Ok(out)
}

/// `κ ∫₀ᵀ sin²θ dτ`, the exponent of the adiabatic emission probability.
pub fn emission_exponent(p: &SystemParams, omega: &PulseSchedule, t_end: f64) -> f64 {
    p.kappa * integrate_fn(|t| mixing_angle_at(p, omega, t).sin().powi(2), 0.0, t_end, 0.25)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first().is_some_and(|&t0| t0 != 0.0) {
        return Err(DynamicsError::InvalidParams("grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DynamicsError::InvalidParams("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Composite Simpson on a uniform grid (trapezoid for a trailing odd
/// interval); plain trapezoid on a non-uniform grid.
pub fn integrate_samples(grid: &[f64], values: &[f64]) -> f64 {
    assert_eq!(grid.len(), values.len());
    let n = grid.len();
    if n < 2 {
        return 0.0;
    }
    let h = grid[1] - grid[0];
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1.0));
    if !uniform || n < 3 {
        return grid
            .windows(2)
            .zip(values.windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum();
    }
    let intervals = n - 1;
    let even = intervals - intervals % 2;
    let mut acc = values[0] + values[even];
    for (i, v) in values.iter().enumerate().take(even).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    let mut total = acc * h / 3.0;
    if even < intervals {
        total += 0.5 * h * (values[even] + values[even + 1]);
    }
    total
}

fn integrate_complex(grid: &[f64], values: &[C64]) -> C64 {
    let re: Vec<f64> = values.iter().map(|c| c.re).collect();
    let im: Vec<f64> = values.iter().map(|c| c.im).collect();
    C64::new(integrate_samples(grid, &re), integrate_samples(grid, &im))
}

/// Normalized mode overlap `|∫ fA* fB|² / (∫|fA|² ∫|fB|²)`.
pub fn pulse_overlap(grid: &[f64], fa: &[C64], fb: &[C64]) -> Result<f64> {
    if fa.len() != grid.len() || fb.len() != grid.len() {
        return Err(DynamicsError::GridMismatch);
    }
    let na = integrate_samples(grid, &fa.iter().map(|c| c.norm_sqr()).collect::<Vec<_>>());
    let nb = integrate_samples(grid, &fb.iter().map(|c| c.norm_sqr()).collect::<Vec<_>>());
    if !(na > 0.0 && nb > 0.0) {
        return Err(DynamicsError::ZeroNorm);
    }
    let cross: Vec<C64> = fa.iter().zip(fb).map(|(a, b)| a.conj() * b).collect();
    let ov = integrate_complex(grid, &cross).norm_sqr() / (na * nb);
    Ok(ov.min(1.0))
}

pub fn real_to_complex(f: &[f64]) -> Vec<C64> {
    f.iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// Pulse shape as CSV rows `t,re,im`.
pub fn pulse_csv(times: &[f64], f: &[C64]) -> String {
    let mut out = String::from("t,re,im\n");
    for (t, c) in times.iter().zip(f) {
        out.push_str(&format!(
            "{},{},{}\n",
            crate::report::fmt_sig(*t),
            crate::report::fmt_sig(c.re),
            crate::report::fmt_sig(c.im)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{apply, inner, overlap_modulus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn alice(gamma: f64, kappa: f64, delta: f64) -> SystemParams {
        SystemParams {
            side: Side::Alice,
            delta,
            gamma,
            g: 1.0,
            kappa,
            modulation: None,
        }
    }

    fn bob(gamma: f64, kappa: f64, delta: f64) -> SystemParams {
        SystemParams {
            side: Side::Bob,
            ..alice(gamma, kappa, delta)
        }
    }

    fn random_state(space: &Space, rng: &mut ChaCha8Rng) -> StateVector {
        let v: Vec<C64> = (0..space.dim())
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        StateVector::from_dense(space, &v)
    }

    #[test]
    fn hamiltonians_are_hermitian_without_loss() {
        let pulse = PulseSchedule::new(20.0, 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [alice(0.0, 1.0, 0.0), bob(0.0, 1.0, 0.0), alice(0.0, 1.0, 0.7)] {
            for _ in 0..5 {
                let t = rng.random_range(0.0..200.0);
                let h = hamiltonian_parts(&p).unwrap().at(t, &p, &pulse);
                assert!(h.is_hermitian(1e-12));
                // adjoint check on random vectors
                let a = random_state(h.domain(), &mut rng);
                let b = random_state(h.domain(), &mut rng);
                let lhs = inner(&a, &apply(&h, &b).unwrap()).unwrap();
                let rhs = inner(&apply(&h, &a).unwrap(), &b).unwrap();
                assert!((lhs - rhs).norm() < 1e-12);
            }
        }
        let lossy = hamiltonian_alice(10.0, &alice(0.1, 1.0, 0.0), &pulse).unwrap();
        assert!(!lossy.is_hermitian(1e-12));
    }

    #[test]
    fn wrong_side_is_rejected() {
        let pulse = PulseSchedule::new(20.0, 200.0);
        assert!(matches!(
            hamiltonian_alice(0.0, &bob(0.0, 1.0, 0.0), &pulse),
            Err(DynamicsError::WrongSide { .. })
        ));
        assert!(matches!(
            hamiltonian_bob(0.0, &alice(0.0, 1.0, 0.0), &pulse),
            Err(DynamicsError::WrongSide { .. })
        ));
    }

    #[test]
    fn cavity_matrix_elements() {
        let pulse = PulseSchedule::new(20.0, 200.0);
        let h = hamiltonian_alice(0.0, &alice(0.0, 1.0, 0.0), &pulse).unwrap();
        let v = h
            .entry(&[(ALICE_ATOM, "e_L"), (ALICE_CAV_L, "0"), (ALICE_CAV_R, "0")], &[(ALICE_ATOM, "g_0"), (ALICE_CAV_L, "1"), (ALICE_CAV_R, "0")])
            .unwrap();
        assert_eq!(v, ONE);
        let h = hamiltonian_bob(0.0, &bob(0.0, 1.0, 0.0), &pulse).unwrap();
        let v = h
            .entry(&[(BOB_ATOM, "e_0"), (BOB_CAV_L, "0"), (BOB_CAV_R, "0")], &[(BOB_ATOM, "g_L"), (BOB_CAV_L, "0"), (BOB_CAV_R, "1")])
            .unwrap();
        assert_eq!(v, ONE);
    }

    #[test]
    fn dark_states_are_null_vectors_for_any_real_detuning() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pulse = PulseSchedule::new(20.0, 200.0);
        for delta in [0.0, 0.8, -2.5] {
            for p in [alice(0.0, 1.0, delta), bob(0.0, 1.0, delta)] {
                let parts = hamiltonian_parts(&p).unwrap();
                for _ in 0..20 {
                    let t = rng.random_range(0.0..200.0);
                    let h = parts.at(t, &p, &pulse);
                    for d in dark_states(&p, &pulse, t) {
                        assert!((d.norm_sqr() - 1.0).abs() < 1e-12);
                        assert!(apply(&h, &d).unwrap().norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dark_state_limits_and_orthogonality() {
        let d = dark_states_at_angle(Side::Alice, 0.0);
        let gl = StateVector::basis(&alice_space(), &[(ALICE_ATOM, "g_L"), (ALICE_CAV_L, "0"), (ALICE_CAV_R, "0")]).unwrap();
        assert_eq!(d[0], gl);
        let far = dark_states_at_angle(Side::Alice, mixing_angle(Side::Alice, 1.0, 1e9));
        let photon = StateVector::basis(&alice_space(), &[(ALICE_ATOM, "g_0"), (ALICE_CAV_L, "1"), (ALICE_CAV_R, "0")]).unwrap();
        assert!((inner(&photon, &far[0]).unwrap() + ONE).norm() < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let th = rng.random_range(0.0..PI / 2.0);
            let d = dark_states_at_angle(Side::Alice, th);
            assert!(inner(&d[0], &d[1]).unwrap().norm() < 1e-15);
        }
    }

    #[test]
    fn mixing_angle_definitions() {
        let (g, om) = (1.3, 0.7);
        let ta = mixing_angle(Side::Alice, g, om);
        assert!((ta.cos() - g / (g * g + om * om).sqrt()).abs() < 1e-15);
        let tb = mixing_angle(Side::Bob, g, om);
        assert!((tb.cos() - SQRT_2 * g / (2.0 * g * g + om * om).sqrt()).abs() < 1e-15);
        assert!((tb.sin() - om / (2.0 * g * g + om * om).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pulse_family_invariants() {
        for shape in [PulseShape::SinSquaredRamp, PulseShape::TanhRamp, PulseShape::Linear] {
            let p = PulseSchedule {
                shape,
                omega_max: 5.0,
                t_total: 100.0,
                hold_fraction: 0.25,
            };
            assert_eq!(p.omega(0.0), 0.0);
            assert!((p.omega(75.0) - 5.0).abs() < 1e-12);
            let samples: Vec<f64> = (0..=1000).map(|i| p.omega(i as f64 * 0.1)).collect();
            assert!(samples.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        }
        assert!(PulseSchedule { hold_fraction: 1.0, ..PulseSchedule::new(1.0, 1.0) }.validate().is_err());
    }

    #[test]
    fn no_drive_keeps_initial_state() {
        let p = alice(0.1, 1.0, 0.0);
        let mut pulse = PulseSchedule::new(20.0, 20.0);
        pulse.omega_max = 1e-300; // effectively Ω ≡ 0
        let psi0 = alice_initial(ONE, ZERO);
        let r = evolve(&psi0, &p, &pulse, 0.02).unwrap();
        let diff = r.final_state.sub(&psi0).unwrap().norm();
        assert!(diff < 1e-10, "diff {diff}");
        assert!(r.emission_prob < 1e-20);
    }

    #[test]
    fn slow_ramp_without_loss_reaches_photonic_dark_state() {
        let p = alice(0.0, 0.0, 0.0);
        let pulse = PulseSchedule::new(20.0, 200.0);
        let (a, b) = (C64::new(0.6, 0.0), C64::new(0.0, 0.8));
        let r = evolve(&alice_initial(a, b), &p, &pulse, 0.2).unwrap();
        let target = adiabatic_target(&p, &pulse, 200.0, a, b);
        let ov = overlap_modulus(&target, &r.final_state).unwrap();
        assert!(ov > 0.999, "overlap {ov}");
        assert!((r.residual_norm_sqr - 1.0).abs() < 1e-8);
    }

    #[test]
    fn full_ramp_emits_with_near_unit_probability() {
        let pulse = PulseSchedule::new(20.0, 200.0);
        for (p, psi) in [(alice(0.0, 1.0, 0.0), alice_initial(ONE, ZERO)), (bob(0.0, 1.0, 0.0), bob_initial())] {
            let r = evolve(&psi, &p, &pulse, 0.2).unwrap();
            assert!(r.emission_prob >= 0.99, "{:?}: {}", p.side, r.emission_prob);
            assert!(r.closure_error().abs() < 1e-8);
            assert!((r.emitted.trace() - r.emission_prob).abs() < 1e-10);
        }
    }

    #[test]
    fn step_size_guard() {
        let pulse = PulseSchedule::new(20.0, 200.0);
        let err = evolve(&alice_initial(ONE, ZERO), &alice(0.0, 1.0, 0.0), &pulse, 1.0).unwrap_err();
        assert!(matches!(err, DynamicsError::StepTooLarge { .. }));
    }

    #[test]
    fn modulation_bounds_and_identity() {
        let p = alice(0.1, 1.0, 0.0);
        assert!(matches!(coupling_modulation(&p, 1.0, 1.0), Err(DynamicsError::ModulationDepth(_))));
        let m = coupling_modulation(&p, 0.0, 1.0).unwrap();
        for t in [0.0, 0.3, 17.0, 199.9] {
            assert_eq!(m.coupling_at(t), p.coupling_at(t));
        }
    }

    #[test]
    fn analytic_pulse_limits() {
        // θ ≡ 0 when the pump is negligible
        let p = alice(0.0, 1.0, 0.0);
        let pulse = PulseSchedule::new(1e-300, 10.0);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        assert!(pulse_shape_analytic(&p, &pulse, &grid).unwrap().iter().all(|f| f.abs() < 1e-290));
        // θ ≡ π/2, κ = 1: f = e^{-t/2}
        let grid: Vec<f64> = (0..=40_000).map(|i| i as f64 * 1e-3).collect();
        let f = pulse_shape_from_angle(1.0, |_| PI / 2.0, &grid).unwrap();
        for (t, v) in grid.iter().zip(&f).step_by(997) {
            assert!((v - (-t / 2.0).exp()).abs() < 1e-12, "t={t}: {v}");
        }
        let sq: Vec<f64> = f.iter().map(|x| x * x).collect();
        // closed form over [0, 40]: 1 − e^{-40}
        assert!((integrate_samples(&grid, &sq) - 1.0).abs() < 1e-9);
        assert!(pulse_shape_analytic(&p, &pulse, &[0.0, 1.0, 0.5]).is_err());
    }

    #[test]
    fn overlap_basics() {
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        let f: Vec<C64> = grid.iter().map(|t| C64::new((-(t - 3.0) * (t - 3.0)).exp(), 0.0)).collect();
        let g: Vec<C64> = grid.iter().map(|t| C64::new(if *t < 5.0 { 0.0 } else { 1.0 }, 0.0)).collect();
        let h: Vec<C64> = grid.iter().map(|t| C64::new(if *t < 5.0 { 1.0 } else { 0.0 }, 0.0)).collect();
        assert!((pulse_overlap(&grid, &f, &f).unwrap() - 1.0).abs() < 1e-12);
        assert!((pulse_overlap(&grid, &f, &f.iter().map(|x| x * C64::new(0.0, 3.0)).collect::<Vec<_>>()).unwrap() - 1.0).abs() < 1e-12);
        // disjoint support (the single shared sample at t = 5 is excluded)
        let g2: Vec<C64> = grid.iter().map(|t| C64::new(if *t <= 5.0 { 0.0 } else { 1.0 }, 0.0)).collect();
        assert!(pulse_overlap(&grid, &h, &g2).unwrap() < 1e-15);
        let ab = pulse_overlap(&grid, &f, &g).unwrap();
        let ba = pulse_overlap(&grid, &g, &f).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(matches!(pulse_overlap(&grid, &f, &vec![ZERO; grid.len()]), Err(DynamicsError::ZeroNorm)));
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.3).collect();
        let v: Vec<f64> = grid.iter().map(|t| t * t * t - 2.0 * t).collect();
        let exact = 3.0f64.powi(4) / 4.0 - 9.0;
        assert!((integrate_samples(&grid, &v) - exact).abs() < 1e-12);
    }
}
