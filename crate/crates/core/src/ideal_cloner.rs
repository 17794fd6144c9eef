//! Algebraic model of the optimal symmetric 1→2 qubit cloner.
//!
//! The input qubit `1` is combined with an ancilla singlet on qubits `2, 3`
//! and projected with `(I₁₂ − |ψ⁻⟩⟨ψ⁻|₁₂) ⊗ I₃`. Qubits `1, 2` carry the two
//! clones, qubit `3` the universal-NOT output. Nothing here depends on any
//! dynamics; the protocol layer is checked against it.

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::qstate::{
    self, apply, fidelity_pure, normalize, partial_trace, tensor, DensityMatrix, LinearOperator,
    Space, StateError, StateVector, Subsystem,
};

pub const Q1: &str = "1";
pub const Q2: &str = "2";
pub const Q3: &str = "3";

/// Single-qubit input `a|0⟩ + b|1⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputQubit {
    pub a: C64,
    pub b: C64,
}

impl InputQubit {
    /// Normalized input. Fails if `|a|² + |b|²` is off by more than 1e-12.
    pub fn new(a: C64, b: C64) -> Result<Self, StateError> {
        let n2 = a.norm_sqr() + b.norm_sqr();
        if (n2 - 1.0).abs() > 1e-12 {
            return Err(StateError::NotNormalized(n2));
        }
        Ok(Self { a, b })
    }

    /// Rescale to unit norm.
    pub fn renormalized(a: C64, b: C64) -> Result<Self, StateError> {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        if !(n > qstate::NORM_FLOOR) {
            return Err(StateError::DegenerateBranch {
                norm: n,
                floor: qstate::NORM_FLOOR,
            });
        }
        Ok(Self { a: a / n, b: b / n })
    }

    pub fn zero() -> Self {
        Self {
            a: C64::new(1.0, 0.0),
            b: C64::new(0.0, 0.0),
        }
    }

    pub fn one() -> Self {
        Self {
            a: C64::new(0.0, 0.0),
            b: C64::new(1.0, 0.0),
        }
    }

    /// Bloch-sphere parametrization `cos(θ/2)|0⟩ + e^{iφ} sin(θ/2)|1⟩`.
    pub fn from_bloch(theta: f64, phi: f64) -> Self {
        Self {
            a: C64::new((theta / 2.0).cos(), 0.0),
            b: C64::from_polar((theta / 2.0).sin(), phi),
        }
    }

    /// Haar-random pure qubit: `cos θ` uniform in `[-1, 1]`, `φ` uniform in `[0, 2π)`.
    pub fn haar<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let cos_theta: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        Self::from_bloch(cos_theta.acos(), phi)
    }

    /// The orthogonal state `b*|0⟩ − a*|1⟩`.
    pub fn orthogonal(&self) -> Self {
        Self {
            a: self.b.conj(),
            b: -self.a.conj(),
        }
    }

    /// `a|zero⟩ + b|one⟩` on one subsystem of `space`.
    pub fn ket_on(&self, space: &Space, id: &str, zero: &str, one: &str) -> Result<StateVector, StateError> {
        StateVector::from_terms(space, &[(self.a, &[(id, zero)]), (self.b, &[(id, one)])])
    }

    pub fn ket(&self, id: &str) -> StateVector {
        let space = Space::new(vec![Subsystem::qubit(id)]).expect("one subsystem");
        self.ket_on(&space, id, "0", "1").expect("qubit levels")
    }
}

#[derive(Clone, Debug)]
pub struct CloneOutput {
    /// Normalized post-projection state over qubits 1, 2, 3.
    pub state: StateVector,
    pub branch_prob: f64,
    pub rho_clone1: DensityMatrix,
    pub rho_clone2: DensityMatrix,
    pub rho_anti: DensityMatrix,
}

fn qubit_space(ids: &[&str]) -> Space {
    Space::new(ids.iter().map(|i| Subsystem::qubit(*i)).collect()).expect("distinct ids")
}

/// Singlet `(|01⟩ − |10⟩)/√2` on the two named qubits.
pub fn singlet_on(x: &str, y: &str) -> StateVector {
    let s = qubit_space(&[x, y]);
    StateVector::from_terms(
        &s,
        &[
            (C64::new(FRAC_1_SQRT_2, 0.0), &[(x, "0"), (y, "1")]),
            (C64::new(-FRAC_1_SQRT_2, 0.0), &[(x, "1"), (y, "0")]),
        ],
    )
    .expect("qubit levels")
}

/// Ancilla singlet on qubits 2, 3.
pub fn singlet() -> StateVector {
    singlet_on(Q2, Q3)
}

/// `I − |ψ⁻⟩⟨ψ⁻|` on two qubits.
pub fn symmetric_projector_on(x: &str, y: &str) -> LinearOperator {
    let s = singlet_on(x, y);
    LinearOperator::identity(s.space())
        .sub(&LinearOperator::outer(&s, &s))
        .expect("same space")
}

/// `(I₁₂ − |ψ⁻⟩₁₂⟨ψ⁻|₁₂) ⊗ I₃`, explicit on all three qubits.
pub fn projector_p123() -> LinearOperator {
    symmetric_projector_on(Q1, Q2)
        .extend_identity(&qubit_space(&[Q1, Q2, Q3]))
        .expect("disjoint")
}

pub fn clone(q: &InputQubit) -> CloneOutput {
    let n2 = q.a.norm_sqr() + q.b.norm_sqr();
    assert!((n2 - 1.0).abs() <= 1e-12, "input qubit is not normalized: {n2}");
    let pi = tensor(&q.ket(Q1), &singlet()).expect("disjoint qubits");
    let projected = apply(&projector_p123(), &pi).expect("projector acts on 1,2,3");
    let (state, branch_prob) =
        normalize(&projected).expect("a normalized input cannot lie in the projector kernel");
    let rho_clone1 = partial_trace(&state, &[Q1]).expect("qubit 1");
    let rho_clone2 = partial_trace(&state, &[Q2])
        .expect("qubit 2")
        .rename_subsystem(Q2, Q1)
        .expect("rename");
    let rho_anti = partial_trace(&state, &[Q3]).expect("qubit 3");
    CloneOutput {
        state,
        branch_prob,
        rho_clone1,
        rho_clone2,
        rho_anti,
    }
}

pub fn clone_fidelity(q: &InputQubit) -> f64 {
    let out = clone(q);
    fidelity_pure(&out.rho_clone1, &q.ket(Q1)).expect("same space")
}

pub fn unot_fidelity(q: &InputQubit) -> f64 {
    let out = clone(q);
    fidelity_pure(&out.rho_anti, &q.orthogonal().ket(Q3)).expect("same space")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{inner, overlap_modulus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    /// Term-by-term literal `√(2/3)(|ζ₁⟩|1⟩ − |ζ₀⟩|0⟩)`.
    fn literal_output(q: &InputQubit) -> StateVector {
        let s = qubit_space(&[Q1, Q2, Q3]);
        let k = (2.0f64 / 3.0).sqrt();
        let (a, b) = (q.a, q.b);
        StateVector::from_terms(
            &s,
            &[
                // ζ₁ ⊗ |1⟩
                (a * k, &[(Q1, "0"), (Q2, "0"), (Q3, "1")]),
                (b * k * 0.5, &[(Q1, "0"), (Q2, "1"), (Q3, "1")]),
                (b * k * 0.5, &[(Q1, "1"), (Q2, "0"), (Q3, "1")]),
                // −ζ₀ ⊗ |0⟩
                (-b * k, &[(Q1, "1"), (Q2, "1"), (Q3, "0")]),
                (-a * k * 0.5, &[(Q1, "0"), (Q2, "1"), (Q3, "0")]),
                (-a * k * 0.5, &[(Q1, "1"), (Q2, "0"), (Q3, "0")]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn singlet_amplitudes_and_antisymmetry() {
        let s = singlet();
        let amps = s.to_dense();
        let r = FRAC_1_SQRT_2;
        let expect = [0.0, r, -r, 0.0];
        for (x, e) in amps.iter().zip(expect) {
            assert!((x - c(e)).norm() < 1e-15);
        }
        let swapped = s.swap_subsystems(Q2, Q3).unwrap();
        assert_eq!(swapped, s.scaled(c(-1.0)));
        let k00 = StateVector::basis(s.space(), &[(Q2, "0"), (Q3, "0")]).unwrap();
        assert_eq!(inner(&k00, &s).unwrap(), c(0.0));
        assert!((s.norm_sqr() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projector_is_idempotent_hermitian_with_singlet_kernel() {
        let p = projector_p123();
        assert!(p.is_hermitian(1e-12));
        let p2 = p.compose(&p).unwrap();
        assert!(p2.max_abs_diff(&p).unwrap() < 1e-12);
        for x in ["0", "1"] {
            let k = tensor(&singlet_on(Q1, Q2), &StateVector::basis(&qubit_space(&[Q3]), &[(Q3, x)]).unwrap()).unwrap();
            assert!(apply(&p, &k).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn projector_rank_is_six() {
        // eigendecomposition oracle: count eigenvalues near one
        let m = projector_p123().to_dense();
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        let ev = h.symmetric_eigenvalues();
        let ones = ev.iter().filter(|l| (*l - 1.0).abs() < 1e-10).count();
        let zeros = ev.iter().filter(|l| l.abs() < 1e-10).count();
        assert_eq!((ones, zeros), (6, 2));
    }

    #[test]
    fn clone_of_zero() {
        let out = clone(&InputQubit::zero());
        assert!((out.branch_prob - 0.75).abs() < 1e-15);
        let r = &out.rho_clone1;
        assert!((r.entry(&[(Q1, "0")], &[(Q1, "0")]).unwrap() - c(5.0 / 6.0)).norm() < 1e-14);
        assert!((r.entry(&[(Q1, "1")], &[(Q1, "1")]).unwrap() - c(1.0 / 6.0)).norm() < 1e-14);
        assert!(r.entry(&[(Q1, "0")], &[(Q1, "1")]).unwrap().norm() < 1e-14);
    }

    #[test]
    fn rotated_input_is_universal() {
        let q = InputQubit::new(c(FRAC_1_SQRT_2), c(FRAC_1_SQRT_2)).unwrap();
        assert!((clone_fidelity(&q) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_constants_at_poles() {
        for q in [InputQubit::zero(), InputQubit::one()] {
            assert!((clone_fidelity(&q) - 5.0 / 6.0).abs() < 1e-12);
            assert!((unot_fidelity(&q) - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_sweep_is_input_independent_and_matches_literal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fc = Vec::new();
        let mut fu = Vec::new();
        for _ in 0..100 {
            let q = InputQubit::haar(&mut rng);
            let out = clone(&q);
            assert!((out.branch_prob - 0.75).abs() < 1e-12);
            assert!((out.rho_clone1.matrix() - out.rho_clone2.matrix()).iter().all(|v| v.norm() < 1e-12));
            let ov = overlap_modulus(&out.state, &literal_output(&q)).unwrap();
            assert!(ov > 1.0 - 1e-12, "overlap {ov}");
            fc.push(clone_fidelity(&q));
            fu.push(unot_fidelity(&q));
        }
        let spread = |v: &[f64]| {
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&fc) < 1e-12);
        assert!(spread(&fu) < 1e-12);
        let mean = fu.iter().sum::<f64>() / fu.len() as f64;
        let var = fu.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / fu.len() as f64;
        assert!(var < 1e-24);
        assert!((fc[0] - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        assert!(InputQubit::new(c(1.0), c(1.0)).is_err());
        let q = InputQubit::renormalized(c(1.0), c(1.0)).unwrap();
        assert!((q.a - c(FRAC_1_SQRT_2)).norm() < 1e-15);
    }
}
