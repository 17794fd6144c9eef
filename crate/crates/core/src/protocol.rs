//! End-to-end cloning protocol: prepare both nodes, let each cavity emit,
//! interfere the photons, herald on a two-fold coincidence, and score.
//!
//! Basis dictionary used throughout:
//!
//! | logical | Alice atom | photon | Bob atom |
//! |---------|------------|--------|----------|
//! | `0`     | `g_L`      | `H`    | `g_L`    |
//! | `1`     | `g_R`      | `V`    | `g_R`    |
//!
//! Clones live on paths `3`, `4`; the tele-NOT output is Bob's atom.

use std::f64::consts::FRAC_PI_2;

use log::warn;
use nalgebra::Matrix2;
use num_complex::Complex64 as C64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adiabatic::{
    alice_initial, bob_initial, dark_states_at_angle, evolve, pulse_overlap, DynamicsError,
    DynamicsReport, PulseSchedule, Side, SystemParams, ALICE_ATOM, ALICE_CAV_L, ALICE_CAV_R,
    BOB_ATOM, BOB_CAV_L, BOB_CAV_R,
};
use crate::ideal_cloner::InputQubit;
use crate::linear_optics::{
    coincidence_bookkeeping, herald_with_visibility, hwp0, mode_id, polarization_qubit,
    qwp_relabel, symmetric_project, CoincidenceBreakdown, DetectorPattern, OpticsError, Pol,
    PATH_3, PATH_4, PATH_A, PATH_B,
};
use crate::qstate::{
    fidelity_pure, normalize, partial_trace_dm, tensor, DensityMatrix, StateError, StateVector,
};
use crate::report::fmt_sig;

/// Emission probability below which a dynamic run is flagged degenerate.
pub const EMISSION_FLOOR: f64 = 0.5;
/// Emission probability below which a dynamic run gets a diagnostic.
pub const EMISSION_DIAGNOSTIC: f64 = 0.99;
/// Mean dark counts per window above which the detector model warns.
pub const DARK_WINDOW_WARN: f64 = 0.2;
pub const DEFAULT_MC_TRIALS: u64 = 200_000;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("Alice and Bob were sampled on different time grids")]
    GridMismatch,
    #[error("{side:?} emitted with probability {prob:e}; nothing to herald")]
    NoEmission { side: Side, prob: f64 },
    #[error("heralded state vanished (probability {0:e})")]
    NoHerald(f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Analytic,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub params: SystemParams,
    pub pulse: PulseSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub eta: f64,
    /// Dark-count rate per detector.
    pub dark_rate: f64,
    /// Coincidence window.
    pub window: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            dark_rate: 0.0,
            window: 1.0,
        }
    }
}

impl DetectorConfig {
    /// Mean dark counts per detector and window.
    pub fn mean_dark(&self) -> f64 {
        self.dark_rate * self.window
    }

    /// Probability that a detector fires at least once from dark counts alone.
    pub fn dark_click_prob(&self) -> f64 {
        -(-self.mean_dark()).exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub input: InputQubit,
    pub alice: NodeConfig,
    pub bob: NodeConfig,
    pub mode: Mode,
    pub detector: DetectorConfig,
    pub seed: u64,
    /// Pulse sampling interval; `None` means `t_total / 1000`.
    pub dt: Option<f64>,
    pub mc_trials: u64,
    pub emission_floor: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let t_total = 200.0;
        Self {
            input: InputQubit::zero(),
            alice: NodeConfig {
                params: SystemParams::new(Side::Alice),
                pulse: PulseSchedule::new(20.0, t_total),
            },
            bob: NodeConfig {
                params: SystemParams::new(Side::Bob),
                pulse: PulseSchedule::new(20.0 * std::f64::consts::SQRT_2, t_total),
            },
            mode: Mode::Analytic,
            detector: DetectorConfig::default(),
            seed: 0,
            dt: None,
            mc_trials: DEFAULT_MC_TRIALS,
            emission_floor: EMISSION_FLOOR,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProtocolError::Config(m.into()));
        let n2 = self.input.a.norm_sqr() + self.input.b.norm_sqr();
        if (n2 - 1.0).abs() > 1e-12 {
            return bad(&format!("input is not normalized (|a|^2+|b|^2 = {n2})"));
        }
        if self.alice.params.side != Side::Alice || self.bob.params.side != Side::Bob {
            return bad("node sides are swapped");
        }
        self.alice.params.validate()?;
        self.bob.params.validate()?;
        self.alice.pulse.validate()?;
        self.bob.pulse.validate()?;
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.eta) {
            return bad("detector.eta must lie in [0, 1]");
        }
        if !(d.dark_rate >= 0.0 && d.dark_rate.is_finite()) {
            return bad("detector.dark_rate must be finite and >= 0");
        }
        if !(d.window > 0.0 && d.window.is_finite()) {
            return bad("detector.window must be > 0");
        }
        if self.mc_trials == 0 {
            return bad("mc_trials must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.emission_floor) {
            return bad("emission_floor must lie in [0, 1]");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("dt must be > 0");
            }
        }
        Ok(())
    }

    /// Common sampling interval of both nodes.
    pub fn sample_dt(&self) -> Result<f64> {
        if self.alice.pulse.t_total != self.bob.pulse.t_total {
            return Err(ProtocolError::Config(
                "alice and bob must share t_total so their pulses can be overlapped".into(),
            ));
        }
        Ok(self.dt.unwrap_or(self.alice.pulse.t_total / 1000.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelities {
    pub clone_1: f64,
    pub clone_2: f64,
    pub telenot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McDetection {
    pub trials: u64,
    pub heralds: u64,
    pub false_heralds: u64,
    pub p_detected: f64,
    pub p_detected_err: f64,
    pub false_fraction: f64,
    pub false_fraction_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub eta: f64,
    pub dark_rate: f64,
    pub window: f64,
    pub dark_click_prob: f64,
    /// Heralds caused by the photons landing on a coincidence pair.
    pub p_genuine: f64,
    /// All heralds, closed form.
    pub p_detected: f64,
    pub false_herald_fraction: f64,
    pub monte_carlo: McDetection,
}

#[derive(Clone, Debug, Serialize)]
pub struct DynamicsPair {
    pub alice: DynamicsReport,
    pub bob: DynamicsReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct CloneReport {
    pub mode: Mode,
    pub input: InputQubit,
    /// Heralded pure state on photons 3, 4 and Bob's atom (analytic mode).
    #[serde(serialize_with = "crate::report::serialize_opt_state")]
    pub post_state: Option<StateVector>,
    /// Normalized heralded state on photons 3, 4 and Bob's atom.
    #[serde(serialize_with = "crate::report::serialize_density")]
    pub post_rho: DensityMatrix,
    /// Fidelities seen after the detector model.
    pub clone_fidelity_1: f64,
    pub clone_fidelity_2: f64,
    pub telenot_fidelity: f64,
    /// Fidelities of the heralded state with ideal detectors.
    pub heralded: Fidelities,
    /// Fidelity of Bob's atom with the orthogonal input when no herald occurred.
    pub telenot_fidelity_unheralded: f64,
    /// `⟨P_sym⟩` of the photon pair given both emissions.
    pub p_symmetric: f64,
    /// Trace of the visibility-weighted heralded state given both emissions.
    pub p_herald: f64,
    /// Two-fold coincidence probability including both emission probabilities.
    pub p_operational: f64,
    pub p_detected: f64,
    pub false_herald_fraction: f64,
    pub overlap_visibility: f64,
    pub emission_prob_alice: f64,
    pub emission_prob_bob: f64,
    pub breakdown: CoincidenceBreakdown,
    pub detection: DetectionSummary,
    pub dynamics: Option<DynamicsPair>,
    pub warnings: Vec<String>,
}

impl CloneReport {
    pub fn adiabaticity_violated(&self) -> bool {
        self.dynamics
            .as_ref()
            .is_some_and(|d| d.alice.adiabaticity_warning || d.bob.adiabaticity_warning)
    }
}

/// Keep only the branch in which the node's cavity holds exactly one photon.
fn condition_on_emission(s: &StateVector, cav_l: &str, cav_r: &str) -> StateVector {
    let space = s.space().clone();
    let amps = s
        .amplitudes()
        .iter()
        .filter(|(l, _)| {
            let n = |id| space.level_name(l, id).ok().and_then(|v| v.parse::<u32>().ok()).unwrap_or(0);
            n(cav_l) + n(cav_r) == 1
        })
        .map(|(l, c)| (l.clone(), *c))
        .collect();
    StateVector::from_map(space, amps)
}

/// Waveplates between the cavities and the first beam splitter: a QWP on
/// each path, then the 0° HWP on Bob's path.
pub fn photonic_encoding(s: &StateVector) -> Result<StateVector> {
    let s = qwp_relabel(s, PATH_A)?;
    let s = qwp_relabel(&s, PATH_B)?;
    Ok(hwp0(&s, PATH_B)?)
}

/// The photon pair plus Bob's atom just before the first beam splitter,
/// in the perfectly adiabatic limit (both mixing angles at π/2).
pub fn pre_interference_state(q: &InputQubit) -> Result<StateVector> {
    let da = dark_states_at_angle(Side::Alice, FRAC_PI_2);
    let alice = da[0].scaled(q.a).add(&da[1].scaled(q.b))?;
    let alice = condition_on_emission(&alice, ALICE_CAV_L, ALICE_CAV_R).select(ALICE_ATOM, "g_0")?;
    let bob = condition_on_emission(&dark_states_at_angle(Side::Bob, FRAC_PI_2)[0], BOB_CAV_L, BOB_CAV_R);
    let (joint, _) = normalize(&tensor(&alice, &bob)?)?;
    photonic_encoding(&joint)
}

/// `b*|g_L⟩ − a*|g_R⟩` on Bob's atom.
pub fn telenot_target(q: &InputQubit, atom_space: &crate::qstate::Space) -> Result<StateVector> {
    let o = q.orthogonal();
    Ok(o.ket_on(atom_space, BOB_ATOM, "g_L", "g_R")?)
}

fn score(post_rho: &DensityMatrix, q: &InputQubit) -> Result<Fidelities> {
    let clone = |path: &str| -> Result<f64> {
        let h = mode_id(path, Pol::H);
        let v = mode_id(path, Pol::V);
        let rho = partial_trace_dm(post_rho, &[&h, &v])?;
        Ok(fidelity_pure(&rho, &polarization_qubit(path, q.a, q.b))?)
    };
    Ok(Fidelities {
        clone_1: clone(PATH_3)?,
        clone_2: clone(PATH_4)?,
        telenot: telenot_fidelity_of(post_rho, q)?,
    })
}

fn telenot_fidelity_of(rho: &DensityMatrix, q: &InputQubit) -> Result<f64> {
    let atom = partial_trace_dm(rho, &[BOB_ATOM])?;
    let target = telenot_target(q, atom.space())?;
    Ok(fidelity_pure(&atom, &target)?)
}

/// Fidelity of Bob's atom with `|ψ⊥⟩` after tracing out the photons.
pub fn telenot_check(report: &CloneReport, q: &InputQubit) -> Result<f64> {
    telenot_fidelity_of(&report.post_rho, q)
}

/// Reduced 2×2 density matrix of the photonic clone on `path` in the
/// `(H, V)` basis.
pub fn clone_qubit_matrix(report: &CloneReport, path: &str) -> Result<Matrix2<C64>> {
    let h = mode_id(path, Pol::H);
    let v = mode_id(path, Pol::V);
    let rho = partial_trace_dm(&report.post_rho, &[&h, &v])?;
    let lh = [(h.as_str(), "1"), (v.as_str(), "0")];
    let lv = [(h.as_str(), "0"), (v.as_str(), "1")];
    Ok(Matrix2::new(
        rho.entry(&lh, &lh)?,
        rho.entry(&lh, &lv)?,
        rho.entry(&lv, &lh)?,
        rho.entry(&lv, &lv)?,
    ))
}

struct Heralded {
    post_rho: DensityMatrix,
    p_symmetric: f64,
    p_herald: f64,
    breakdown: CoincidenceBreakdown,
    telenot_unheralded: f64,
}

fn herald(components: &[(f64, StateVector)], visibility: f64, q: &InputQubit) -> Result<Heralded> {
    let mut pre: Option<DensityMatrix> = None;
    for (w, s) in components {
        let term = DensityMatrix::from_pure(s).scaled(*w);
        pre = Some(match pre {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let pre = pre.ok_or(ProtocolError::NoHerald(0.0))?;
    let breakdown = coincidence_bookkeeping(components, visibility)?;
    let heralded = herald_with_visibility(&pre, visibility)?;
    let p_herald = heralded.trace();
    if !(p_herald > crate::qstate::NORM_FLOOR) {
        return Err(ProtocolError::NoHerald(p_herald));
    }
    let atom_pre = partial_trace_dm(&pre, &[BOB_ATOM])?;
    let atom_pre = atom_pre.scaled(1.0 / atom_pre.trace());
    let telenot_unheralded = fidelity_pure(&atom_pre, &telenot_target(q, atom_pre.space())?)?;
    Ok(Heralded {
        post_rho: heralded.scaled(1.0 / p_herald),
        p_symmetric: breakdown.p_symmetric,
        p_herald,
        breakdown,
        telenot_unheralded,
    })
}

/// Perfect-adiabatic-limit run: the photon pair is exactly the ideal
/// encoded state and the photons overlap perfectly.
pub fn run_analytic(cfg: &ProtocolConfig) -> Result<CloneReport> {
    cfg.validate()?;
    let q = cfg.input;
    let pre = pre_interference_state(&q)?;
    let post_state = symmetric_project(&pre)?.projected_state;
    let h = herald(&[(1.0, pre)], 1.0, &q)?;
    let heralded = score(&h.post_rho, &q)?;
    let report = CloneReport {
        mode: Mode::Analytic,
        input: q,
        post_state,
        post_rho: h.post_rho,
        clone_fidelity_1: heralded.clone_1,
        clone_fidelity_2: heralded.clone_2,
        telenot_fidelity: heralded.telenot,
        heralded,
        telenot_fidelity_unheralded: h.telenot_unheralded,
        p_symmetric: h.p_symmetric,
        p_herald: h.p_herald,
        p_operational: h.breakdown.p_operational,
        p_detected: h.breakdown.p_operational,
        false_herald_fraction: 0.0,
        overlap_visibility: 1.0,
        emission_prob_alice: 1.0,
        emission_prob_bob: 1.0,
        breakdown: h.breakdown,
        detection: ideal_detection(),
        dynamics: None,
        warnings: Vec::new(),
    };
    detector_model(&report, &cfg.detector, cfg.seed, cfg.mc_trials)
}

fn ideal_detection() -> DetectionSummary {
    DetectionSummary {
        eta: 1.0,
        dark_rate: 0.0,
        window: 1.0,
        dark_click_prob: 0.0,
        p_genuine: 0.0,
        p_detected: 0.0,
        false_herald_fraction: 0.0,
        monte_carlo: McDetection {
            trials: 0,
            heralds: 0,
            false_heralds: 0,
            p_detected: 0.0,
            p_detected_err: 0.0,
            false_fraction: 0.0,
            false_fraction_err: 0.0,
        },
    }
}

/// Normalized emitted-branch ensemble of one node, atom and photon.
fn emitted_ensemble(r: &DynamicsReport, keep: &[&str]) -> Result<Vec<(f64, StateVector)>> {
    let rho = partial_trace_dm(&r.emitted, keep)?;
    let rho = rho.scaled(1.0 / r.emission_prob);
    Ok(rho.eigen_components(1e-14))
}

/// Full-dynamics run: both nodes are integrated, the emitted photon states
/// are read off the integrator, and the pulse-shape mismatch enters as a
/// visibility-weighted mixture of interfering and distinguishable pairs.
pub fn run_dynamic(cfg: &ProtocolConfig) -> Result<CloneReport> {
    cfg.validate()?;
    let dt = cfg.sample_dt()?;
    let q = cfg.input;
    let (ra, rb) = rayon::join(
        || evolve(&alice_initial(q.a, q.b), &cfg.alice.params, &cfg.alice.pulse, dt),
        || evolve(&bob_initial(), &cfg.bob.params, &cfg.bob.pulse, dt),
    );
    let (ra, rb) = (ra?, rb?);
    run_dynamic_from(cfg, ra, rb)
}

/// Scores a pair of already integrated nodes.
pub fn run_dynamic_from(cfg: &ProtocolConfig, ra: DynamicsReport, rb: DynamicsReport) -> Result<CloneReport> {
    if ra.times != rb.times {
        return Err(ProtocolError::GridMismatch);
    }
    let mut warnings = Vec::new();
    for r in [&ra, &rb] {
        if !(r.emission_prob > crate::qstate::NORM_FLOOR) {
            return Err(ProtocolError::NoEmission {
                side: r.side,
                prob: r.emission_prob,
            });
        }
        if r.emission_prob < cfg.emission_floor {
            let m = format!(
                "{:?}: emission probability {} below floor {}; protocol degenerate",
                r.side,
                fmt_sig(r.emission_prob),
                fmt_sig(cfg.emission_floor)
            );
            warn!("{m}");
            warnings.push(m);
        } else if r.emission_prob < EMISSION_DIAGNOSTIC {
            let m = format!(
                "{:?}: emission probability {} below {}",
                r.side,
                fmt_sig(r.emission_prob),
                fmt_sig(EMISSION_DIAGNOSTIC)
            );
            warn!("{m}");
            warnings.push(m);
        }
        if r.adiabaticity_warning {
            warnings.push(format!(
                "{:?}: excited-state population {} exceeds {}",
                r.side,
                fmt_sig(r.excited_pop_max),
                fmt_sig(crate::adiabatic::EXCITED_POP_WARN)
            ));
        }
    }
    let visibility = pulse_overlap(&ra.times, &ra.pulse_shape, &rb.pulse_shape)?;
    score_dynamic(cfg, ra, rb, visibility, warnings)
}

/// Heralds and scores two integrated nodes at a given two-photon
/// visibility.
pub fn score_dynamic(
    cfg: &ProtocolConfig,
    ra: DynamicsReport,
    rb: DynamicsReport,
    visibility: f64,
    warnings: Vec<String>,
) -> Result<CloneReport> {
    let q = cfg.input;
    let alice = emitted_ensemble(&ra, &[ALICE_CAV_L, ALICE_CAV_R])?;
    let bob = emitted_ensemble(&rb, &[BOB_ATOM, BOB_CAV_L, BOB_CAV_R])?;
    let mut components = Vec::with_capacity(alice.len() * bob.len());
    for (wa, sa) in &alice {
        for (wb, sb) in &bob {
            components.push((wa * wb, photonic_encoding(&tensor(sa, sb)?)?));
        }
    }
    let h = herald(&components, visibility, &q)?;
    let heralded = score(&h.post_rho, &q)?;
    let both = ra.emission_prob * rb.emission_prob;
    let p_operational = both * h.breakdown.p_operational;
    let report = CloneReport {
        mode: Mode::Dynamic,
        input: q,
        post_state: None,
        post_rho: h.post_rho,
        clone_fidelity_1: heralded.clone_1,
        clone_fidelity_2: heralded.clone_2,
        telenot_fidelity: heralded.telenot,
        heralded,
        telenot_fidelity_unheralded: h.telenot_unheralded,
        p_symmetric: h.p_symmetric,
        p_herald: h.p_herald,
        p_operational,
        p_detected: p_operational,
        false_herald_fraction: 0.0,
        overlap_visibility: visibility,
        emission_prob_alice: ra.emission_prob,
        emission_prob_bob: rb.emission_prob,
        breakdown: h.breakdown,
        detection: ideal_detection(),
        dynamics: Some(DynamicsPair { alice: ra, bob: rb }),
        warnings,
    };
    detector_model(&report, &cfg.detector, cfg.seed, cfg.mc_trials)
}

pub fn run(cfg: &ProtocolConfig) -> Result<CloneReport> {
    match cfg.mode {
        Mode::Analytic => run_analytic(cfg),
        Mode::Dynamic => run_dynamic(cfg),
    }
}

/// Detector arrival patterns over (D1, D2, D1', D2') for the whole shot,
/// including shots where one or both nodes failed to emit.
pub fn arrival_distribution(report: &CloneReport) -> Vec<DetectorPattern> {
    let (ea, eb) = (report.emission_prob_alice, report.emission_prob_bob);
    let mut out: Vec<DetectorPattern> = report
        .breakdown
        .patterns
        .iter()
        .map(|p| DetectorPattern {
            counts: p.counts,
            probability: p.probability * ea * eb,
        })
        .collect();
    // a lone photon reaches each detector with probability 1/4
    let single = ea * (1.0 - eb) + eb * (1.0 - ea);
    if single > 0.0 {
        for k in 0..4 {
            let mut counts = [0u8; 4];
            counts[k] = 1;
            out.push(DetectorPattern {
                counts,
                probability: 0.25 * single,
            });
        }
    }
    let none = (1.0 - ea) * (1.0 - eb);
    if none > 0.0 {
        out.push(DetectorPattern {
            counts: [0; 4],
            probability: none,
        });
    }
    out
}

fn herald_prob_given(counts: [u8; 4], eta: f64, dark: f64) -> f64 {
    let q: Vec<f64> = counts
        .iter()
        .map(|&n| 1.0 - (1.0 - eta).powi(n as i32) * (1.0 - dark))
        .collect();
    let (p12, p34) = (q[0] * q[1], q[2] * q[3]);
    p12 + p34 - p12 * p34
}

/// Applies finite efficiency and dark counts to a report.
///
/// Closed form: each detector fires with probability
/// `1 − (1−η)^n (1 − d)` where `n` photons arrive and `d = 1 − e^{−rate·window}`;
/// a herald is either detector pair firing. Heralds whose photons did not
/// land on a coincidence pair are false and carry no polarization
/// information: clones dilute toward fidelity ½, Bob's atom toward its
/// unheralded state. The closed form is cross-checked by a seeded ChaCha8
/// Monte Carlo.
pub fn detector_model(report: &CloneReport, det: &DetectorConfig, seed: u64, trials: u64) -> Result<CloneReport> {
    let eta = det.eta;
    let d = det.dark_click_prob();
    let mut out = report.clone();
    if det.mean_dark() > DARK_WINDOW_WARN {
        let m = format!(
            "mean dark counts per window {} exceed {}; the Poisson false-herald estimate is rough",
            fmt_sig(det.mean_dark()),
            fmt_sig(DARK_WINDOW_WARN)
        );
        warn!("{m}");
        out.warnings.push(m);
    }
    let arrivals = arrival_distribution(report);
    let p_true = report.p_operational * (eta * eta);
    let (mut p_genuine_extra, mut p_false) = (0.0, 0.0);
    for a in &arrivals {
        let h = herald_prob_given(a.counts, eta, d);
        if a.is_coincidence() {
            p_genuine_extra += a.probability * (h - eta * eta);
        } else {
            p_false += a.probability * h;
        }
    }
    let p_genuine = p_true + p_genuine_extra;
    let p_detected = p_genuine + p_false;
    let false_fraction = if p_detected > 0.0 {
        p_false / p_detected
    } else {
        0.0
    };
    let monte_carlo = monte_carlo_detection(&arrivals, det, seed, trials);

    let f = report.heralded;
    let (c1, c2, tn) = if false_fraction > 0.0 {
        let keep = 1.0 - false_fraction;
        (
            keep * f.clone_1 + false_fraction * 0.5,
            keep * f.clone_2 + false_fraction * 0.5,
            keep * f.telenot + false_fraction * report.telenot_fidelity_unheralded,
        )
    } else {
        (f.clone_1, f.clone_2, f.telenot)
    };
    out.clone_fidelity_1 = c1;
    out.clone_fidelity_2 = c2;
    out.telenot_fidelity = tn;
    out.p_detected = p_detected;
    out.false_herald_fraction = false_fraction;
    out.detection = DetectionSummary {
        eta,
        dark_rate: det.dark_rate,
        window: det.window,
        dark_click_prob: d,
        p_genuine,
        p_detected,
        false_herald_fraction: false_fraction,
        monte_carlo,
    };
    Ok(out)
}

/// Shot-by-shot simulation: sample the arrival pattern, thin each
/// detector's photons binomially with `η`, add Poisson dark counts, and
/// record heralds.
pub fn monte_carlo_detection(arrivals: &[DetectorPattern], det: &DetectorConfig, seed: u64, trials: u64) -> McDetection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = arrivals.iter().map(|a| a.probability.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let pick = WeightedIndex::new(&weights).ok();
    let dark = (det.mean_dark() > 0.0).then(|| Poisson::new(det.mean_dark()).expect("positive mean"));
    let (mut heralds, mut false_heralds) = (0u64, 0u64);
    for _ in 0..trials {
        // arrival weights can fall short of one by rounding; the gap is "no photons"
        let pattern = match &pick {
            Some(p) if rng.random::<f64>() < total => Some(&arrivals[p.sample(&mut rng)]),
            _ => None,
        };
        let counts = pattern.map_or([0; 4], |p| p.counts);
        let mut click = [false; 4];
        for (k, c) in click.iter_mut().enumerate() {
            let detected = counts[k] > 0
                && Binomial::new(counts[k] as u64, det.eta).expect("eta in [0,1]").sample(&mut rng) > 0;
            let dark_hit = dark.as_ref().is_some_and(|p| p.sample(&mut rng) >= 1.0);
            *c = detected || dark_hit;
        }
        if (click[0] && click[1]) || (click[2] && click[3]) {
            heralds += 1;
            if !pattern.is_some_and(|p| p.is_coincidence()) {
                false_heralds += 1;
            }
        }
    }
    let n = trials as f64;
    let p = heralds as f64 / n;
    let ff = if heralds > 0 {
        false_heralds as f64 / heralds as f64
    } else {
        0.0
    };
    McDetection {
        trials,
        heralds,
        false_heralds,
        p_detected: p,
        p_detected_err: (p * (1.0 - p) / n).sqrt(),
        false_fraction: ff,
        false_fraction_err: if heralds > 0 {
            (ff * (1.0 - ff) / heralds as f64).sqrt()
        } else {
            0.0
        },
    }
}

// ---------------------------------------------------------------------------
// Flat summaries

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 26] = [
    "schema_version",
    "mode",
    "a_re",
    "a_im",
    "b_re",
    "b_im",
    "clone_fidelity_1",
    "clone_fidelity_2",
    "telenot_fidelity",
    "heralded_clone_fidelity_1",
    "heralded_clone_fidelity_2",
    "heralded_telenot_fidelity",
    "p_symmetric",
    "p_herald",
    "p_operational",
    "p_reference",
    "p_detected",
    "false_herald_fraction",
    "overlap_visibility",
    "emission_prob_alice",
    "emission_prob_bob",
    "excited_pop_max_alice",
    "excited_pop_max_bob",
    "closure_error_alice",
    "closure_error_bob",
    "adiabaticity_warning",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

pub fn csv_row(r: &CloneReport) -> String {
    let dyn_field = |f: fn(&DynamicsReport) -> f64, alice: bool| {
        r.dynamics.as_ref().map_or(String::new(), |d| fmt_sig(f(if alice { &d.alice } else { &d.bob })))
    };
    let cells = [
        CSV_SCHEMA_VERSION.to_string(),
        match r.mode {
            Mode::Analytic => "analytic".into(),
            Mode::Dynamic => "dynamic".into(),
        },
        fmt_sig(r.input.a.re),
        fmt_sig(r.input.a.im),
        fmt_sig(r.input.b.re),
        fmt_sig(r.input.b.im),
        fmt_sig(r.clone_fidelity_1),
        fmt_sig(r.clone_fidelity_2),
        fmt_sig(r.telenot_fidelity),
        fmt_sig(r.heralded.clone_1),
        fmt_sig(r.heralded.clone_2),
        fmt_sig(r.heralded.telenot),
        fmt_sig(r.p_symmetric),
        fmt_sig(r.p_herald),
        fmt_sig(r.p_operational),
        fmt_sig(r.breakdown.p_reference),
        fmt_sig(r.p_detected),
        fmt_sig(r.false_herald_fraction),
        fmt_sig(r.overlap_visibility),
        fmt_sig(r.emission_prob_alice),
        fmt_sig(r.emission_prob_bob),
        dyn_field(|d| d.excited_pop_max, true),
        dyn_field(|d| d.excited_pop_max, false),
        dyn_field(|d| d.closure_error(), true),
        dyn_field(|d| d.closure_error(), false),
        r.adiabaticity_violated().to_string(),
    ];
    cells.join(",")
}

// ---------------------------------------------------------------------------
// Sweeps

/// Runs `base` once per value of `key` in parallel; results keep the order
/// of `values`.
pub fn sweep(base: &ProtocolConfig, key: &str, values: &[f64]) -> std::result::Result<Vec<(f64, CloneReport)>, SweepError> {
    let configs: Vec<ProtocolConfig> = values
        .iter()
        .map(|&v| crate::config::with_value(base, key, v))
        .collect::<std::result::Result<_, _>>()
        .map_err(SweepError::Config)?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, &v)| run(cfg).map(|r| (v, r)).map_err(|e| SweepError::Run { value: v, source: e }))
        .collect()
}

/// Evenly spaced points from `from` to `to` inclusive.
pub fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![from],
        n => (0..n).map(|i| from + (to - from) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(crate::config::ConfigError),
    #[error("sweep point {value}: {source}")]
    Run { value: f64, source: ProtocolError },
}

pub fn sweep_csv(key: &str, rows: &[(f64, CloneReport)]) -> String {
    let mut out = format!("param,value,{}\n", csv_header());
    for (v, r) in rows {
        out.push_str(&format!("{key},{},{}\n", fmt_sig(*v), csv_row(r)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ideal_cloner;
    use crate::qstate::{overlap_modulus, Space};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn analytic(q: InputQubit) -> CloneReport {
        let cfg = ProtocolConfig {
            input: q,
            ..ProtocolConfig::default()
        };
        run_analytic(&cfg).unwrap()
    }

    /// Heralded state written out term by term.
    fn literal_post_state(q: &InputQubit, space: &Space) -> StateVector {
        let (s23, s16) = ((2.0f64 / 3.0).sqrt(), (1.0f64 / 6.0).sqrt());
        let r = |x: f64| C64::new(x, 0.0);
        let hh: &[(&str, &str)] = &[("3.H", "1"), ("3.V", "0"), ("4.H", "1"), ("4.V", "0")];
        let vv: &[(&str, &str)] = &[("3.H", "0"), ("3.V", "1"), ("4.H", "0"), ("4.V", "1")];
        let hv: &[(&str, &str)] = &[("3.H", "1"), ("3.V", "0"), ("4.H", "0"), ("4.V", "1")];
        let vh: &[(&str, &str)] = &[("3.H", "0"), ("3.V", "1"), ("4.H", "1"), ("4.V", "0")];
        let with = |photons: &[(&'static str, &'static str)], atom: &'static str| {
            let mut v = photons.to_vec();
            v.push((BOB_ATOM, atom));
            v
        };
        let terms = [
            (q.a * r(s23), with(hh, "g_R")),
            (-q.a * r(s16), with(hv, "g_L")),
            (-q.a * r(s16), with(vh, "g_L")),
            (-q.b * r(s23), with(vv, "g_L")),
            (q.b * r(s16), with(hv, "g_R")),
            (q.b * r(s16), with(vh, "g_R")),
        ];
        let refs: Vec<(C64, &[(&str, &str)])> = terms.iter().map(|(c, l)| (*c, l.as_slice())).collect();
        StateVector::from_terms(space, &refs).unwrap()
    }

    #[test]
    fn pre_interference_state_matches_product_form() {
        let q = InputQubit::new(C64::new(0.6, 0.0), C64::new(0.0, 0.8)).unwrap();
        let s = pre_interference_state(&q).unwrap();
        let alice = polarization_qubit(PATH_A, q.a, q.b);
        let h = polarization_qubit(PATH_B, C64::new(1.0, 0.0), C64::new(0.0, 0.0));
        let v = polarization_qubit(PATH_B, C64::new(0.0, 0.0), C64::new(1.0, 0.0));
        let atom = crate::qstate::Space::new(vec![crate::qstate::Subsystem::new(BOB_ATOM, &crate::adiabatic::BOB_LEVELS)]).unwrap();
        let gr = StateVector::basis(&atom, &[(BOB_ATOM, "g_R")]).unwrap();
        let gl = StateVector::basis(&atom, &[(BOB_ATOM, "g_L")]).unwrap();
        let bob = tensor(&gr, &h)
            .unwrap()
            .sub(&tensor(&gl, &v).unwrap())
            .unwrap()
            .scaled(C64::new(FRAC_1_SQRT_2, 0.0));
        let expect = tensor(&alice, &bob).unwrap();
        assert!((overlap_modulus(&s, &expect).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heralded_state_zero_input() {
        let r = analytic(InputQubit::zero());
        let post = r.post_state.clone().unwrap();
        let lit = literal_post_state(&InputQubit::zero(), post.space());
        assert!(overlap_modulus(&post, &lit).unwrap() > 1.0 - 1e-12);
        assert!((r.p_symmetric - 0.75).abs() < 1e-12);
        assert!((post.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelities_are_optimal_and_symmetric() {
        for q in [InputQubit::zero(), InputQubit::one(), InputQubit::from_bloch(1.1, 0.3)] {
            let r = analytic(q);
            assert!((r.clone_fidelity_1 - 5.0 / 6.0).abs() < 1e-12);
            assert!((r.clone_fidelity_1 - r.clone_fidelity_2).abs() < 1e-12);
            assert!((r.telenot_fidelity - 2.0 / 3.0).abs() < 1e-12);
            assert!((telenot_check(&r, &q).unwrap() - ideal_cloner::unot_fidelity(&q)).abs() < 1e-12);
            assert!((r.telenot_fidelity_unheralded - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn clone_matrices_match_ideal_cloner() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = InputQubit::haar(&mut rng);
            let r = analytic(q);
            let ideal = ideal_cloner::clone(&q);
            for (path, rho) in [(PATH_3, &ideal.rho_clone1), (PATH_4, &ideal.rho_clone2)] {
                let m = clone_qubit_matrix(&r, path).unwrap();
                let d = rho.matrix();
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((m[(i, j)] - d[(i, j)]).norm() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn operational_probability_counts_both_outputs() {
        let r = analytic(InputQubit::zero());
        let b = &r.breakdown;
        assert!((b.p_bunch_mode1 + b.p_bunch_mode2 - 0.75).abs() < 1e-12);
        assert!((b.p_antibunch - 0.25).abs() < 1e-12);
        assert!((b.p_coinc_mode1 - 0.1875).abs() < 1e-12);
        assert!((b.p_coinc_mode2 - 0.1875).abs() < 1e-12);
        assert!((r.p_operational - 0.375).abs() < 1e-12);
    }

    #[test]
    fn eta_scales_detection_only() {
        let base = analytic(InputQubit::from_bloch(0.7, 2.0));
        for eta in [0.0, 0.25, 0.5, 1.0] {
            let det = DetectorConfig {
                eta,
                ..DetectorConfig::default()
            };
            let r = detector_model(&base, &det, 1, 1000).unwrap();
            assert_eq!(r.p_detected, base.p_operational * (eta * eta));
            assert_eq!(r.false_herald_fraction, 0.0);
            assert_eq!(r.clone_fidelity_1.to_bits(), base.clone_fidelity_1.to_bits());
            assert_eq!(r.clone_fidelity_2.to_bits(), base.clone_fidelity_2.to_bits());
            assert_eq!(r.telenot_fidelity.to_bits(), base.telenot_fidelity.to_bits());
        }
    }

    #[test]
    fn dark_counts_dilute_and_match_monte_carlo() {
        let base = analytic(InputQubit::zero());
        let det = DetectorConfig {
            eta: 0.1,
            dark_rate: 0.01,
            window: 1.0,
        };
        let r = detector_model(&base, &det, 5, 400_000).unwrap();
        let mc = r.detection.monte_carlo;
        assert!(r.false_herald_fraction > 0.0);
        assert!((mc.false_fraction - r.false_herald_fraction).abs() < 3.0 * mc.false_fraction_err);
        assert!((mc.p_detected - r.p_detected).abs() < 3.0 * mc.p_detected_err);
        assert!(r.clone_fidelity_1 < base.clone_fidelity_1 && r.clone_fidelity_1 > 0.5);
        let again = detector_model(&base, &det, 5, 400_000).unwrap();
        assert_eq!(again.detection, r.detection);
    }

    #[test]
    fn arrival_distribution_is_complete() {
        let mut r = analytic(InputQubit::zero());
        r.emission_prob_alice = 0.9;
        r.emission_prob_bob = 0.8;
        let total: f64 = arrival_distribution(&r).iter().map(|a| a.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_row_matches_header() {
        let r = analytic(InputQubit::zero());
        assert_eq!(csv_row(&r).split(',').count(), CSV_COLUMNS.len());
        assert!(csv_row(&r).contains(",0.833333333333,"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ProtocolConfig::default();
        cfg.detector.eta = 1.5;
        assert!(matches!(run_analytic(&cfg), Err(ProtocolError::Config(_))));
        let mut cfg = ProtocolConfig::default();
        cfg.bob.pulse.t_total = 100.0;
        assert!(cfg.sample_dt().is_err());
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
    }
}
