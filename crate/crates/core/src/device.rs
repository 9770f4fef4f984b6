//! Transfer matrices of a single 2×2 Mach–Zehnder interferometer.
//!
//! An MZI is modelled as the stage product
//! `B(r2, t2)·L_out · P(θ) · B(r, t)·L_in · P(φ)`, where `P(x) = diag(e^{ix}, 1)`
//! puts a phase on the top arm, `B(r, t) = [[r, it], [it, r]]` is a
//! directional coupler and `L_in`, `L_out` are diagonal arm attenuations.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Tuned phases of one MZI: `theta` is the internal phase between the two
/// couplers, `phi` the input-side phase on the top arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePair {
    pub theta: f64,
    pub phi: f64,
}

impl PhasePair {
    /// Tuned phases, normalised into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta: wrap_phase(theta),
            phi: wrap_phase(phi),
        }
    }

    /// Phases taken as given, e.g. after an additive perturbation.
    pub fn unwrapped(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }
}

/// Amplitude reflectance/transmittance of the input (`r`, `t`) and output
/// (`r2`, `t2`) couplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitterQuad {
    pub r: f64,
    pub t: f64,
    pub r2: f64,
    pub t2: f64,
}

impl SplitterQuad {
    /// Two balanced 3-dB couplers.
    pub const IDEAL: Self = Self {
        r: FRAC_1_SQRT_2,
        t: FRAC_1_SQRT_2,
        r2: FRAC_1_SQRT_2,
        t2: FRAC_1_SQRT_2,
    };

    pub fn ideal() -> Self {
        Self::IDEAL
    }

    /// Each value clamped into `[0, 1]`. `r² + t² = 1` is not imposed.
    pub fn clamped(r: f64, t: f64, r2: f64, t2: f64) -> Self {
        Self {
            r: r.clamp(0.0, 1.0),
            t: t.clamp(0.0, 1.0),
            r2: r2.clamp(0.0, 1.0),
            t2: t2.clamp(0.0, 1.0),
        }
    }

    /// Ideal couplers shifted by the given deltas, then clamped.
    pub fn perturbed(self, dr: f64, dt: f64, dr2: f64, dt2: f64) -> Self {
        Self::clamped(self.r + dr, self.t + dt, self.r2 + dr2, self.t2 + dt2)
    }
}

impl Default for SplitterQuad {
    fn default() -> Self {
        Self::IDEAL
    }
}

/// Amplitude attenuation on the four arms: `l*` in front of the input
/// coupler, `r*` in front of the output coupler; `t`/`b` for top/bottom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmLoss {
    pub beta_lt: f64,
    pub beta_lb: f64,
    pub beta_rt: f64,
    pub beta_rb: f64,
}

impl ArmLoss {
    pub const LOSSLESS: Self = Self::uniform(1.0);

    pub fn lossless() -> Self {
        Self::LOSSLESS
    }

    pub const fn uniform(beta: f64) -> Self {
        Self {
            beta_lt: beta,
            beta_lb: beta,
            beta_rt: beta,
            beta_rb: beta,
        }
    }
}

impl Default for ArmLoss {
    fn default() -> Self {
        Self::LOSSLESS
    }
}

/// 2×2 transfer matrix as a plain array, row-major.
pub type Block2 = [[Complex64; 2]; 2];

fn mul2(a: &Block2, b: &Block2) -> Block2 {
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn coupler(r: f64, t: f64, top: f64, bottom: f64) -> Block2 {
    // B(r, t) · diag(top, bottom)
    let r = Complex64::new(r, 0.0);
    let it = I * t;
    [[r * top, it * bottom], [it * top, r * bottom]]
}

fn top_phase(x: f64) -> Block2 {
    let zero = Complex64::new(0.0, 0.0);
    [[Complex64::cis(x), zero], [zero, Complex64::new(1.0, 0.0)]]
}

/// Full MZI transfer block; the hot path used by mesh evaluation.
pub fn mzi_block(phases: PhasePair, splitters: SplitterQuad, loss: ArmLoss) -> Block2 {
    let first = coupler(splitters.r, splitters.t, loss.beta_lt, loss.beta_lb);
    let second = coupler(splitters.r2, splitters.t2, loss.beta_rt, loss.beta_rb);
    let inner = mul2(&first, &top_phase(phases.phi));
    let inner = mul2(&top_phase(phases.theta), &inner);
    mul2(&second, &inner)
}

fn block_to_matrix(b: &Block2) -> ComplexMatrix {
    ComplexMatrix::from_fn(2, 2, |i, j| b[i][j])
}

/// 2×2 MZI transfer matrix for arbitrary couplers and arm losses.
pub fn mzi_transfer(phases: PhasePair, splitters: SplitterQuad, loss: ArmLoss) -> ComplexMatrix {
    block_to_matrix(&mzi_block(phases, splitters, loss))
}

/// First-order change of the ideal MZI matrix for phase offsets
/// `d_theta`, `d_phi`: `∂T/∂θ·Δθ + ∂T/∂φ·Δφ`.
pub fn mzi_first_order_delta(phases: PhasePair, d_theta: f64, d_phi: f64) -> ComplexMatrix {
    let (theta, phi) = (phases.theta, phases.phi);
    let e_t = Complex64::cis(theta);
    let e_p = Complex64::cis(phi);
    let e_tp = Complex64::cis(theta + phi);
    let one = Complex64::new(1.0, 0.0);
    let dd_theta = [[I * e_tp / 2.0, -e_t / 2.0], [-e_tp / 2.0, -I * e_t / 2.0]];
    let dd_phi = [
        [I * e_p * (e_t - one) / 2.0, Complex64::new(0.0, 0.0)],
        [-e_p * (e_t + one) / 2.0, Complex64::new(0.0, 0.0)],
    ];
    ComplexMatrix::from_fn(2, 2, |i, j| dd_theta[i][j] * d_theta + dd_phi[i][j] * d_phi)
}

/// Relative deviation `|ΔT_mn| / |T_mn|` of the four ideal-MZI entries over
/// a `(θ, φ)` grid, each indexed `[theta_index][phi_index]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDeviationGrid {
    pub t11: Vec<Vec<f64>>,
    pub t12: Vec<Vec<f64>>,
    pub t21: Vec<Vec<f64>>,
    pub t22: Vec<Vec<f64>>,
}

impl RelativeDeviationGrid {
    pub fn entries(&self) -> [(&'static str, &Vec<Vec<f64>>); 4] {
        [
            ("T11", &self.t11),
            ("T12", &self.t12),
            ("T21", &self.t21),
            ("T22", &self.t22),
        ]
    }
}

/// Sensitivity map with proportional phase errors `Δθ = kθ`, `Δφ = kφ`.
pub fn relative_deviation_grid(k_factor: f64, theta_grid: &[f64], phi_grid: &[f64]) -> Result<RelativeDeviationGrid> {
    const NAMES: [&str; 4] = ["T11", "T12", "T21", "T22"];
    let mut out: [Vec<Vec<f64>>; 4] = Default::default();
    for grid in out.iter_mut() {
        *grid = vec![vec![0.0; phi_grid.len()]; theta_grid.len()];
    }
    for (a, &theta) in theta_grid.iter().enumerate() {
        for (b, &phi) in phi_grid.iter().enumerate() {
            let p = PhasePair::unwrapped(theta, phi);
            let nominal = mzi_transfer(p, SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
            let delta = mzi_first_order_delta(p, k_factor * theta, k_factor * phi);
            for (idx, name) in NAMES.iter().enumerate() {
                let (i, j) = (idx / 2, idx % 2);
                let denom = nominal[(i, j)].norm();
                if denom < 1e-12 {
                    return Err(Error::Singularity {
                        entry: name,
                        theta,
                        phi,
                    });
                }
                out[idx][a][b] = delta[(i, j)].norm() / denom;
            }
        }
    }
    let [t11, t12, t21, t22] = out;
    Ok(RelativeDeviationGrid { t11, t12, t21, t22 })
}

/// Thermo-optic phase shifter obeying `Φ = k·V²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseShifterSpec {
    /// rad/V²
    pub k: f64,
    /// Voltage for a π shift.
    pub v_pi: f64,
    /// Voltage for a 2π shift.
    pub v_max: f64,
}

impl PhaseShifterSpec {
    /// Reference heater with `V_π = 4.36 V` (k ≈ 0.165 rad/V²).
    pub const DEFAULT_V_PI: f64 = 4.36;

    pub fn from_k(k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "phase shifter constant must be positive, got {k}"
            )));
        }
        Ok(Self {
            k,
            v_pi: (PI / k).sqrt(),
            v_max: (TAU / k).sqrt(),
        })
    }

    pub fn from_v_pi(v_pi: f64) -> Result<Self> {
        if !(v_pi > 0.0 && v_pi.is_finite()) {
            return Err(Error::InvalidInput(format!("V_pi must be positive, got {v_pi}")));
        }
        Self::from_k(PI / (v_pi * v_pi))
    }
}

impl Default for PhaseShifterSpec {
    fn default() -> Self {
        Self::from_v_pi(Self::DEFAULT_V_PI).expect("constant is valid")
    }
}

const RANGE_SLACK: f64 = 1e-12;
/// Voltages are quoted to the millivolt, so `v_max` itself is only known to
/// that precision.
const VOLTAGE_SLACK: f64 = 1e-3;

/// `Φ = k·V²` for `V ∈ [0, v_max]`.
pub fn phase_from_voltage(v: f64, spec: &PhaseShifterSpec) -> Result<f64> {
    if !(v >= -RANGE_SLACK && v <= spec.v_max + VOLTAGE_SLACK) {
        return Err(Error::OutOfRange {
            what: "heater voltage",
            value: v,
            min: 0.0,
            max: spec.v_max,
        });
    }
    let v = v.max(0.0);
    Ok(spec.k * v * v)
}

/// Inverse of [`phase_from_voltage`] for `Φ ∈ [0, 2π]`.
pub fn voltage_from_phase(phi: f64, spec: &PhaseShifterSpec) -> Result<f64> {
    if !(-RANGE_SLACK..=TAU * (1.0 + RANGE_SLACK)).contains(&phi) {
        return Err(Error::OutOfRange {
            what: "phase",
            value: phi,
            min: 0.0,
            max: TAU,
        });
    }
    Ok((phi.clamp(0.0, TAU) / spec.k).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unitarity_error;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn assert_close(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) {
        let err = a.sub(b).unwrap().max_abs();
        assert!(err <= tol, "max deviation {err:e}\n{a:?}\n{b:?}");
    }

    #[test]
    fn bar_and_cross_states() {
        let t = mzi_transfer(PhasePair::new(0.0, 0.0), SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
        let want = ComplexMatrix::new(2, 2, vec![c(0.0, 0.0), c(0.0, 1.0), c(0.0, 1.0), c(0.0, 0.0)]).unwrap();
        assert_close(&t, &want, 1e-15);

        let t = mzi_transfer(PhasePair::new(PI, 0.0), SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
        let want = ComplexMatrix::new(2, 2, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert_close(&t, &want, 1e-15);
    }

    #[test]
    fn uniform_loss_scales_by_beta_squared() {
        let p = PhasePair::new(1.1, 4.0);
        let beta = 0.87;
        let lossy = mzi_transfer(p, SplitterQuad::IDEAL, ArmLoss::uniform(beta));
        let ideal = mzi_transfer(p, SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
        assert_close(&lossy, &ideal.scale(c(beta * beta, 0.0)), 1e-12);
    }

    #[test]
    fn zero_delta_is_zero() {
        let d = mzi_first_order_delta(PhasePair::new(0.3, 2.0), 0.0, 0.0);
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn delta_is_linear() {
        let p = PhasePair::new(0.7, 1.9);
        let a = mzi_first_order_delta(p, 0.01, -0.02);
        let b = mzi_first_order_delta(p, 0.02, -0.04);
        assert_close(&b, &a.scale(c(2.0, 0.0)), 1e-15);
    }

    #[test]
    fn proportional_delta_matches_closed_form() {
        // ΔT with Δθ = Kθ, Δφ = Kφ, written out entry by entry
        let (theta, phi, k) = (1.3f64, 2.2f64, 0.05f64);
        let got = mzi_first_order_delta(PhasePair::unwrapped(theta, phi), k * theta, k * phi);
        let e = |x: f64| Complex64::cis(x);
        let i = c(0.0, 1.0);
        let want = ComplexMatrix::new(
            2,
            2,
            vec![
                k * ((theta + phi) * i * e(theta + phi) / 2.0 - phi * i * e(phi) / 2.0),
                k * (-theta * e(theta) / 2.0),
                k * (-(theta + phi) * e(theta + phi) / 2.0 - phi * e(phi) / 2.0),
                k * (-theta * i * e(theta) / 2.0),
            ],
        )
        .unwrap();
        assert_close(&got, &want, 1e-14);
    }

    #[test]
    fn second_order_residual() {
        let p = PhasePair::new(0.9, 2.4);
        let nominal = mzi_transfer(p, SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
        let residual = |d: f64| {
            let moved = mzi_transfer(
                PhasePair::unwrapped(p.theta + d, p.phi + d),
                SplitterQuad::IDEAL,
                ArmLoss::LOSSLESS,
            );
            moved
                .sub(&nominal)
                .unwrap()
                .sub(&mzi_first_order_delta(p, d, d))
                .unwrap()
                .frobenius_norm()
        };
        let ratio = residual(1e-2) / residual(5e-3);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn voltage_law_reference_values() {
        let spec = PhaseShifterSpec::default();
        assert!((spec.k - 0.165).abs() < 5e-4);
        assert!((phase_from_voltage(4.36, &spec).unwrap() - PI).abs() < 1e-3);
        assert!((phase_from_voltage(6.166, &spec).unwrap() - TAU).abs() < 1e-3);
        assert_eq!(phase_from_voltage(0.0, &spec).unwrap(), 0.0);
        assert!((spec.v_max - 6.166).abs() < 1e-3);
        assert!((spec.v_pi - (PI / spec.k).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn voltage_range_errors() {
        let spec = PhaseShifterSpec::default();
        assert!(matches!(phase_from_voltage(-0.1, &spec), Err(Error::OutOfRange { .. })));
        assert!(phase_from_voltage(spec.v_max + 0.01, &spec).is_err());
        let back = voltage_from_phase(phase_from_voltage(3.3, &spec).unwrap(), &spec).unwrap();
        assert!((back - 3.3).abs() < 1e-12);
        assert!(voltage_from_phase(7.0, &spec).is_err());
        assert!(voltage_from_phase(-1e-3, &spec).is_err());
        assert!(PhaseShifterSpec::from_k(0.0).is_err());
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(TAU), 0.0);
        assert!((wrap_phase(-0.5) - (TAU - 0.5)).abs() < 1e-15);
        assert!(wrap_phase(-1e-300) < TAU);
        let p = PhasePair::new(7.0, -1.0);
        assert!((0.0..TAU).contains(&p.theta) && (0.0..TAU).contains(&p.phi));
    }

    #[test]
    fn deviation_grid_zero_and_linear() {
        let th = [0.5, 1.0, 2.0];
        let ph = [0.3, 3.0];
        let z = relative_deviation_grid(0.0, &th, &ph).unwrap();
        for (_, g) in z.entries() {
            assert!(g.iter().flatten().all(|&v| v == 0.0));
        }
        let a = relative_deviation_grid(0.05, &th, &ph).unwrap();
        let b = relative_deviation_grid(0.1, &th, &ph).unwrap();
        for ((_, ga), (_, gb)) in a.entries().into_iter().zip(b.entries()) {
            for (ra, rb) in ga.iter().zip(gb) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn deviation_grid_singularities() {
        match relative_deviation_grid(0.05, &[0.0], &[1.0]) {
            Err(Error::Singularity { entry, .. }) => assert_eq!(entry, "T11"),
            other => panic!("expected singularity, got {other:?}"),
        }
        match relative_deviation_grid(0.05, &[PI], &[1.0]) {
            Err(Error::Singularity { entry, .. }) => assert_eq!(entry, "T12"),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn deviation_grows_with_phase() {
        // Along φ every entry is non-decreasing over the whole open range; along θ
        // the T12/T21 moduli vanish at θ = π, so monotonic growth holds on (0, π).
        let k = 0.05;
        let thetas: Vec<f64> = (0..40).map(|i| 0.1 + i as f64 * (PI - 0.2) / 39.0).collect();
        let phis: Vec<f64> = (0..60).map(|i| 0.1 + i as f64 * (TAU - 0.2) / 59.0).collect();
        let g = relative_deviation_grid(k, &thetas, &phis).unwrap();
        for (name, grid) in g.entries() {
            for row in grid {
                assert!(
                    row.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                    "{name} not monotone in phi"
                );
            }
            for b in 0..phis.len() {
                assert!(
                    grid.windows(2).all(|w| w[1][b] >= w[0][b] - 1e-12),
                    "{name} not monotone in theta"
                );
            }
        }
    }

    fn eq1(theta: f64, phi: f64) -> ComplexMatrix {
        let e = |x: f64| Complex64::cis(x);
        let one = c(1.0, 0.0);
        let i = c(0.0, 1.0);
        ComplexMatrix::new(
            2,
            2,
            vec![
                e(phi) / 2.0 * (e(theta) - one),
                i / 2.0 * (e(theta) + one),
                i * e(phi) / 2.0 * (e(theta) + one),
                -(e(theta) - one) / 2.0,
            ],
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn ideal_mzi_is_unitary_and_matches_closed_form(theta in 0.0..TAU, phi in 0.0..TAU) {
            let t = mzi_transfer(PhasePair::new(theta, phi), SplitterQuad::IDEAL, ArmLoss::LOSSLESS);
            prop_assert!(unitarity_error(&t).unwrap() <= 1e-12);
            prop_assert!(t.sub(&eq1(theta, phi)).unwrap().max_abs() <= 1e-12);
        }

        #[test]
        fn lossless_entries_bounded(theta in 0.0..TAU, phi in 0.0..TAU, r in 0.0..1.0f64, t in 0.0..1.0f64, r2 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
            let s = SplitterQuad::clamped(r, t, r2, t2);
            // per-coupler energy conservation keeps every entry inside the unit disc
            let s = SplitterQuad { t: (1.0 - s.r * s.r).sqrt(), t2: (1.0 - s.r2 * s.r2).sqrt(), ..s };
            let m = mzi_transfer(PhasePair::new(theta, phi), s, ArmLoss::LOSSLESS);
            prop_assert!(m.max_abs() <= 1.0 + 1e-12);
        }
    }
}
