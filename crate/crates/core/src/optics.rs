//! Jones-calculus model of a node's QWP → HWP → PBS polarization analyzer.
//!
//! Each node keeps only the PBS transmitted (H) port, so an analyzer setting
//! is a rank-1 projector onto the input state the port transmits.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qmath::{c, inner, kron, CMatrix, DensityMatrix2Q, Ket, Subsystem, C64};

/// HWP offset that makes the `D` label project onto (|H⟩+|V⟩)/√2 under our
/// waveplate conventions. Tomography records are expressed in the frame of
/// labels evaluated at this offset ("label frame").
pub const LABEL_FRAME_X_DEG: f64 = 22.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("compensation objective is flat; state has no usable D/D coherence")]
    DegenerateState,
    #[error("unknown projection label {0:?}")]
    UnknownLabel(String),
}

fn wrap_deg(x: f64) -> f64 {
    let r = x.rem_euclid(180.0);
    if r >= 180.0 {
        0.0
    } else {
        r
    }
}

/// (QWP angle, HWP angle) in degrees from horizontal, both kept in [0, 180).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub qwp_deg: f64,
    pub hwp_deg: f64,
}

impl AnalyzerSetting {
    pub fn new(qwp_deg: f64, hwp_deg: f64) -> Self {
        Self {
            qwp_deg: wrap_deg(qwp_deg),
            hwp_deg: wrap_deg(hwp_deg),
        }
    }

    /// State transmitted by the PBS H port: (HWP·QWP)†|H⟩.
    pub fn analyzed_state(&self) -> Ket {
        let m = &hwp_jones(self.hwp_deg) * &qwp_jones(self.qwp_deg);
        m.adjoint().apply(&[c(1.0, 0.0), c(0.0, 0.0)])
    }

    pub fn projector(&self) -> CMatrix {
        analyzer_projector(*self)
    }
}

impl fmt::Display for AnalyzerSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}°, {}°)", self.qwp_deg, self.hwp_deg)
    }
}

/// Operational projection labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl Label {
    pub const ALL: [Label; 6] = [Label::H, Label::V, Label::D, Label::A, Label::R, Label::L];

    /// Waveplate angles for this label at compensation offset `x_deg`.
    pub fn setting(self, x_deg: f64) -> AnalyzerSetting {
        match self {
            Label::H => AnalyzerSetting::new(0.0, 0.0),
            Label::V => AnalyzerSetting::new(0.0, 45.0),
            Label::D => AnalyzerSetting::new(45.0, x_deg),
            Label::A => AnalyzerSetting::new(45.0, x_deg + 45.0),
            Label::R => AnalyzerSetting::new(45.0, x_deg + 22.5),
            Label::L => AnalyzerSetting::new(45.0, x_deg - 22.5),
        }
    }

    /// Setting in the label frame.
    pub fn frame_setting(self) -> AnalyzerSetting {
        self.setting(LABEL_FRAME_X_DEG)
    }

    /// Ket the label projects onto in the label frame.
    pub fn ket(self) -> Ket {
        self.frame_setting().analyzed_state()
    }

    pub fn partner(self) -> Label {
        match self {
            Label::H => Label::V,
            Label::V => Label::H,
            Label::D => Label::A,
            Label::A => Label::D,
            Label::R => Label::L,
            Label::L => Label::R,
        }
    }

    pub fn basis(self) -> Basis {
        match self {
            Label::H | Label::V => Basis::HV,
            Label::D | Label::A => Basis::DA,
            Label::R | Label::L => Basis::RL,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Label {
    type Err = OpticsError;
    fn from_str(s: &str) -> Result<Self, OpticsError> {
        match s.trim() {
            "H" => Ok(Label::H),
            "V" => Ok(Label::V),
            "D" => Ok(Label::D),
            "A" => Ok(Label::A),
            "R" => Ok(Label::R),
            "L" => Ok(Label::L),
            other => Err(OpticsError::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
    RL,
}

impl Basis {
    pub fn labels(self) -> [Label; 2] {
        match self {
            Basis::HV => [Label::H, Label::V],
            Basis::DA => [Label::D, Label::A],
            Basis::RL => [Label::R, Label::L],
        }
    }
}

impl FromStr for Basis {
    type Err = OpticsError;
    fn from_str(s: &str) -> Result<Self, OpticsError> {
        match s.trim() {
            "HV" | "H/V" => Ok(Basis::HV),
            "DA" | "D/A" => Ok(Basis::DA),
            "RL" | "R/L" => Ok(Basis::RL),
            other => Err(OpticsError::UnknownLabel(other.to_string())),
        }
    }
}

/// A label together with the node's compensation offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLabel {
    pub label: Label,
    pub x_deg: f64,
}

impl ProjectionLabel {
    pub fn setting(&self) -> AnalyzerSetting {
        self.label.setting(self.x_deg)
    }
}

/// Half-wave plate, fast axis at θ; global phase dropped.
pub fn hwp_jones(theta_deg: f64) -> CMatrix {
    let t = 2.0 * theta_deg.to_radians();
    CMatrix::from_real(&[&[t.cos(), t.sin()], &[t.sin(), -t.cos()]])
}

/// Quarter-wave plate, fast axis at θ.
pub fn qwp_jones(theta_deg: f64) -> CMatrix {
    let t = theta_deg.to_radians();
    let (s, co) = t.sin_cos();
    let g = C64::from_polar(1.0, -PI / 4.0);
    let off = c(1.0, -1.0) * (s * co);
    CMatrix::from_rows(&[
        vec![g * c(co * co, s * s), g * off],
        vec![g * off, g * c(s * s, co * co)],
    ])
}

/// Rank-1 projector |χ⟩⟨χ| for the analyzer setting.
pub fn analyzer_projector(setting: AnalyzerSetting) -> CMatrix {
    CMatrix::outer(&setting.analyzed_state())
}

/// tr[ρ (P1 ⊗ P2)]
pub fn coincidence_probability(
    rho: &DensityMatrix2Q,
    s1: AnalyzerSetting,
    s2: AnalyzerSetting,
) -> f64 {
    let v = crate::qmath::kron_ket(&s1.analyzed_state(), &s2.analyzed_state());
    rho.matrix().expectation(&v).re.clamp(0.0, 1.0)
}

/// Local unitary relating a node's physical label projectors at offset `x`
/// to the label frame: P_label(x) = U P_label(frame) U†.
pub fn label_frame_unitary(x_deg: f64) -> CMatrix {
    let a = 2.0 * (x_deg - LABEL_FRAME_X_DEG).to_radians();
    let rot = CMatrix::from_real(&[&[a.cos(), -a.sin()], &[a.sin(), a.cos()]]);
    let q = qwp_jones(45.0);
    &(&q.adjoint() * &rot) * &q
}

/// The state as seen through label-frame analysis when node 1 uses offset
/// `x1` and node 2 uses `x2`.
pub fn to_label_frame(rho: &DensityMatrix2Q, x1_deg: f64, x2_deg: f64) -> DensityMatrix2Q {
    let u = kron(&label_frame_unitary(x1_deg), &label_frame_unitary(x2_deg));
    rho.conjugate_by(&u.adjoint())
}

/// Coincidence probability for labels at per-node offsets.
pub fn label_probability(
    rho: &DensityMatrix2Q,
    l1: ProjectionLabel,
    l2: ProjectionLabel,
) -> f64 {
    coincidence_probability(rho, l1.setting(), l2.setting())
}

/// Golden-section maximization of a unimodal function on [lo, hi].
pub(crate) fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// HWP offset for the `tuned` node maximizing D/D coincidences, with both
/// QWPs at 45° and the other node's HWP at `other_x_deg`.
///
/// Scans at 0.5° steps, then refines by golden section to 0.01°.
pub fn solve_compensation_x(
    rho: &DensityMatrix2Q,
    tuned: Subsystem,
    other_x_deg: f64,
) -> Result<f64, OpticsError> {
    let other = Label::D.setting(other_x_deg);
    let objective = |x: f64| {
        let mine = Label::D.setting(x);
        match tuned {
            Subsystem::First => coincidence_probability(rho, mine, other),
            Subsystem::Second => coincidence_probability(rho, other, mine),
        }
    };
    let grid: Vec<(f64, f64)> = (0..360)
        .map(|k| {
            let x = 0.5 * k as f64;
            (x, objective(x))
        })
        .collect();
    let (best_x, best) = grid
        .iter()
        .copied()
        .fold((0.0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    let worst = grid.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if best - worst < 1e-9 {
        return Err(OpticsError::DegenerateState);
    }
    let x = golden_max(objective, best_x - 0.5, best_x + 0.5, 0.01);
    Ok(wrap_deg(x))
}

/// |⟨a|b⟩|²
pub fn overlap(a: &[C64], b: &[C64]) -> f64 {
    inner(a, b).norm_sqr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qmath::states::{self, bell_density, psi_phase, psi_plus};
    use crate::qmath::{fidelity_with_pure, DensityMatrix2Q};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Equality up to a global phase.
    fn same_ray(a: &[C64], b: &[C64]) -> bool {
        close(overlap(a, b), 1.0, 1e-12)
    }

    #[test]
    fn hwp_examples() {
        assert!(hwp_jones(0.0).max_abs_diff(&CMatrix::from_real(&[&[1., 0.], &[0., -1.]])) < 1e-15);
        assert!(hwp_jones(45.0).max_abs_diff(&CMatrix::from_real(&[&[0., 1.], &[1., 0.]])) < 1e-15);
        let out = hwp_jones(22.5).apply(&states::h());
        assert!(same_ray(&out, &states::d()));
    }

    #[test]
    fn qwp_examples() {
        let q0 = qwp_jones(0.0);
        // diag(1, i) up to global phase
        let ratio = q0[(1, 1)] / q0[(0, 0)];
        assert!(close(ratio.re, 0.0, 1e-15) && close(ratio.im, 1.0, 1e-15));
        assert!(q0[(0, 1)].norm() < 1e-15);

        let q = qwp_jones(13.7);
        let qq = &q.adjoint() * &q;
        assert!(qq.max_abs_diff(&CMatrix::identity(2)) < 1e-12);

        let out = qwp_jones(45.0).apply(&states::h());
        assert!(close(out[0].norm(), out[1].norm(), 1e-12));
        let rel = (out[1] / out[0]).arg().abs();
        assert!(close(rel, PI / 2.0, 1e-12));
    }

    #[test]
    fn projector_examples() {
        let ph = analyzer_projector(AnalyzerSetting::new(0.0, 0.0));
        assert!(ph.max_abs_diff(&CMatrix::outer(&states::h())) < 1e-12);
        let pv = analyzer_projector(AnalyzerSetting::new(0.0, 45.0));
        assert!(pv.max_abs_diff(&CMatrix::outer(&states::v())) < 1e-12);

        let r = AnalyzerSetting::new(45.0, 22.5).analyzed_state();
        let l = AnalyzerSetting::new(45.0, -22.5).analyzed_state();
        assert!(close(overlap(&r, &l), 0.0, 1e-12));
        assert!(close(r[0].norm(), r[1].norm(), 1e-12));
    }

    /// Pins the circular handedness of the operational R label under these
    /// Jones conventions: at x = 0, (45°, 0°) transmits (|H⟩ + i|V⟩)/√2,
    /// and in the label frame (x = 22.5°) the R label, (45°, 45°), transmits
    /// (|H⟩ − i|V⟩)/√2.
    #[test]
    fn circular_handedness_snapshot() {
        let at_zero = AnalyzerSetting::new(45.0, 0.0).analyzed_state();
        assert!(same_ray(&at_zero, &states::r()));
        assert!(same_ray(&Label::R.ket(), &states::l()));
        assert!(same_ray(&Label::L.ket(), &states::r()));
        assert!(same_ray(&Label::D.ket(), &states::d()));
        assert!(same_ray(&Label::A.ket(), &states::a()));
        assert!(same_ray(&Label::H.ket(), &states::h()));
        assert!(same_ray(&Label::V.ket(), &states::v()));
    }

    #[test]
    fn projectors_are_pure_and_idempotent() {
        for x in [0.0, 13.0, 22.5, 77.7] {
            for l in Label::ALL {
                let p = l.setting(x).projector();
                assert!((&p * &p).max_abs_diff(&p) < 1e-12);
                assert!(p.adjoint().max_abs_diff(&p) < 1e-12);
                assert!(close(p.trace().re, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn labels_form_mutually_unbiased_pairs() {
        for x in [0.0, 10.0, 22.5, 100.0] {
            for a in Label::ALL {
                for b in Label::ALL {
                    let o = overlap(
                        &a.setting(x).analyzed_state(),
                        &b.setting(x).analyzed_state(),
                    );
                    let want = if a == b {
                        1.0
                    } else if a.partner() == b {
                        0.0
                    } else {
                        0.5
                    };
                    assert!(close(o, want, 1e-10), "{a} {b} x={x}: {o}");
                }
            }
        }
    }

    #[test]
    fn label_frame_unitary_maps_labels() {
        for x in [0.0, 5.0, 40.0, 123.0] {
            let u = label_frame_unitary(x);
            for l in Label::ALL {
                let phys = l.setting(x).analyzed_state();
                assert!(same_ray(&phys, &u.apply(&l.ket())), "{l} x={x}");
            }
        }
    }

    #[test]
    fn coincidence_probability_examples() {
        let rho = bell_density(&psi_plus());
        let h = Label::H.setting(0.0);
        let v = Label::V.setting(0.0);
        let d = Label::D.setting(0.0);
        assert!(close(coincidence_probability(&rho, h, v), 0.5, 1e-12));
        assert!(close(coincidence_probability(&rho, h, h), 0.0, 1e-12));
        // Direct contraction against the analyzed kets.
        let k = crate::qmath::kron_ket(&d.analyzed_state(), &d.analyzed_state());
        let direct = inner(&k, &psi_plus()).norm_sqr();
        assert!(close(direct, 0.5, 1e-12));
        assert!(close(coincidence_probability(&rho, d, d), 0.5, 1e-12));
    }

    #[test]
    fn basis_outcomes_sum_to_one() {
        let rho = DensityMatrix2Q::mix(
            &states::werner(0.7),
            &DensityMatrix2Q::from_pure(&crate::qmath::kron_ket(&states::r(), &states::d())).unwrap(),
            0.6,
        );
        for (b1, b2) in [(Basis::HV, Basis::DA), (Basis::RL, Basis::RL), (Basis::DA, Basis::HV)] {
            let total: f64 = b1
                .labels()
                .iter()
                .flat_map(|&l1| b2.labels().map(move |l2| (l1, l2)))
                .map(|(l1, l2)| coincidence_probability(&rho, l1.setting(17.0), l2.setting(3.0)))
                .sum();
            assert!(close(total, 1.0, 1e-10));
        }
    }

    #[test]
    fn compensation_scan_examples() {
        let x0 = solve_compensation_x(&bell_density(&psi_phase(0.0)), Subsystem::Second, 0.0).unwrap();
        let p = coincidence_probability(
            &bell_density(&psi_plus()),
            Label::D.setting(0.0),
            Label::D.setting(x0),
        );
        assert!(close(p, 0.5, 1e-6));

        let x90 = solve_compensation_x(&bell_density(&psi_phase(PI / 2.0)), Subsystem::Second, 0.0)
            .unwrap();
        // Objective has period 90°; compare modulo that.
        let shift = (x90 - x0).rem_euclid(90.0);
        let shift = shift.min(90.0 - shift);
        assert!(close(shift, 22.5, 0.02), "x0={x0} x90={x90}");

        assert_eq!(
            solve_compensation_x(&DensityMatrix2Q::maximally_mixed(), Subsystem::Second, 0.0),
            Err(OpticsError::DegenerateState)
        );
    }

    #[test]
    fn compensation_restores_fidelity_for_any_phase() {
        let v = 0.9;
        let reference = (1.0 + 3.0 * v) / 4.0;
        for k in 0..24 {
            let phi = 2.0 * PI * k as f64 / 24.0;
            let rho = DensityMatrix2Q::mix(
                &bell_density(&psi_phase(phi)),
                &DensityMatrix2Q::maximally_mixed(),
                v,
            );
            for tuned in [Subsystem::First, Subsystem::Second] {
                let x = solve_compensation_x(&rho, tuned, 0.0).unwrap();
                let (x1, x2) = match tuned {
                    Subsystem::First => (x, 0.0),
                    Subsystem::Second => (0.0, x),
                };
                let framed = to_label_frame(&rho, x1, x2);
                let f = fidelity_with_pure(&framed, &psi_plus()).unwrap();
                assert!(close(f, reference, 1e-6), "phi={phi} f={f}");
            }
        }
    }

    #[test]
    fn angles_normalized() {
        let s = AnalyzerSetting::new(-22.5, 202.5);
        assert!(close(s.qwp_deg, 157.5, 1e-12));
        assert!(close(s.hwp_deg, 22.5, 1e-12));
    }
}
