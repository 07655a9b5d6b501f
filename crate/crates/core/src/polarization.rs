//! Closed-form measurement statistics of the two-photon singlet state.
//!
//! A polarizer at angle `a` on one photon and `b` on the other, each with
//! a transmitted (+1) and reflected (-1) port, yields
//!
//! ```text
//! P(i, j | a, b) = 1/4 * (1 - i*j*v*cos 2(a - b))
//! ```
//!
//! where `v` in [0, 1] is the fringe visibility of a depolarizing
//! (Werner-type) admixture. Everything downstream - simulated outcome
//! draws, correlation estimates, CHSH values - is checked against these
//! expressions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A polarizer angle, stored in degrees and normalized into [0, 180).
///
/// Polarizer settings are periodic mod 180 degrees: 0 is H, 90 is V,
/// 45 and 135 are the diagonal pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub fn new(degrees: f64) -> Self {
        Angle(degrees.rem_euclid(180.0))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }
}

impl From<f64> for Angle {
    fn from(deg: f64) -> Self {
        Angle::new(deg)
    }
}

/// Detector port behind the polarizing splitter: transmitted or reflected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
        }
    }

    /// Index used for count matrices and detector numbering: Plus = 0.
    pub fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }

    pub fn from_index(i: usize) -> Outcome {
        if i & 1 == 0 {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }

    /// Key-bit convention for the cryptography layer: Plus = 0, Minus = 1.
    pub fn bit(self) -> bool {
        matches!(self, Outcome::Minus)
    }
}

pub const OUTCOMES: [Outcome; 2] = [Outcome::Plus, Outcome::Minus];

/// Per-basis fringe visibilities with interpolation at intermediate
/// analyzer orientations.
///
/// The link is characterized by two numbers, the H/V-basis and the
/// diagonal-basis visibility. For a setting pair (a, b) the effective
/// visibility is
///
/// ```text
/// v(a, b) = v_hv * cos^2(2*m) + v_diag * sin^2(2*m),   m = (a + b) / 2
/// ```
///
/// which reproduces both quoted endpoints when the analyzers sit in a
/// common basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityModel {
    pub v_hv: f64,
    pub v_diag: f64,
}

impl VisibilityModel {
    pub fn new(v_hv: f64, v_diag: f64) -> Result<Self> {
        for v in [v_hv, v_diag] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidVisibility(v));
            }
        }
        Ok(VisibilityModel { v_hv, v_diag })
    }

    /// Single uniform visibility, identical in every basis.
    pub fn uniform(v: f64) -> Result<Self> {
        Self::new(v, v)
    }

    pub fn effective(&self, a: Angle, b: Angle) -> f64 {
        let two_mean = (a.degrees() + b.degrees()).to_radians();
        let (s, c) = two_mean.sin_cos();
        (self.v_hv * c * c + self.v_diag * s * s).clamp(0.0, 1.0)
    }
}

fn check_visibility(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidVisibility(v))
    }
}

/// Joint outcome probability for analyzers at `a` and `b` with effective
/// visibility `v`. The four probabilities over (i, j) sum to one and both
/// marginals are exactly 1/2.
pub fn joint_probability(i: Outcome, j: Outcome, a: Angle, b: Angle, v: f64) -> Result<f64> {
    check_visibility(v)?;
    let delta = 2.0 * (a.radians() - b.radians());
    Ok(0.25 * (1.0 - i.sign() * j.sign() * v * delta.cos()))
}

/// Analytic correlation coefficient E(a, b) = -v * cos 2(a - b); the value
/// the coincidence-count estimator converges to.
pub fn correlation(a: Angle, b: Angle, v: f64) -> Result<f64> {
    check_visibility(v)?;
    let delta = 2.0 * (a.radians() - b.radians());
    Ok(-v * delta.cos())
}

/// The four analyzer angles of a CHSH measurement, in the fixed role
/// order (a, a', b, b').
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshAngles {
    pub alice: Angle,
    pub alice_prime: Angle,
    pub bob: Angle,
    pub bob_prime: Angle,
}

impl ChshAngles {
    pub fn new(alice: f64, alice_prime: f64, bob: f64, bob_prime: f64) -> Self {
        ChshAngles {
            alice: Angle::new(alice),
            alice_prime: Angle::new(alice_prime),
            bob: Angle::new(bob),
            bob_prime: Angle::new(bob_prime),
        }
    }

    /// The (0, 45, 22.5, 67.5) degree settings that maximize S at 2*sqrt(2).
    pub fn canonical() -> Self {
        ChshAngles::new(0.0, 45.0, 22.5, 67.5)
    }

    /// Setting pairs in the estimator role order:
    /// (a,b), (a,b'), (a',b), (a',b').
    pub fn pairs(&self) -> [(Angle, Angle); 4] {
        [
            (self.alice, self.bob),
            (self.alice, self.bob_prime),
            (self.alice_prime, self.bob),
            (self.alice_prime, self.bob_prime),
        ]
    }
}

/// Analytic CHSH parameter S = |E(a,b) - E(a,b') + E(a',b) + E(a',b')|
/// at uniform visibility `v`. Equals 2*sqrt(2)*v at the canonical settings.
pub fn chsh_value(settings: &ChshAngles, v: f64) -> Result<f64> {
    let [p1, p2, p3, p4] = settings.pairs();
    let e1 = correlation(p1.0, p1.1, v)?;
    let e2 = correlation(p2.0, p2.1, v)?;
    let e3 = correlation(p3.0, p3.1, v)?;
    let e4 = correlation(p4.0, p4.1, v)?;
    Ok((e1 - e2 + e3 + e4).abs())
}

/// QBER implied by an effective visibility: (1 - v) / 2.
pub fn qber_from_visibility(v: f64) -> Result<f64> {
    check_visibility(v)?;
    Ok((1.0 - v) / 2.0)
}

/// Draw one joint outcome from the singlet distribution. Test and
/// simulation helper; consumes exactly one uniform.
pub fn draw_joint(rng: &mut impl rand::Rng, a: Angle, b: Angle, v: f64) -> (Outcome, Outcome) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for i in OUTCOMES {
        for j in OUTCOMES {
            acc += joint_probability(i, j, a, b, v).expect("visibility validated by caller");
            if u < acc {
                return (i, j);
            }
        }
    }
    (Outcome::Minus, Outcome::Minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    const EPS: f64 = 1e-12;

    #[test]
    fn angle_normalization_is_idempotent() {
        for deg in [-540.0, -90.0, 0.0, 45.0, 179.999, 180.0, 725.0] {
            let a = Angle::new(deg);
            assert!((0.0..180.0).contains(&a.degrees()), "{deg} -> {}", a.degrees());
            assert_eq!(Angle::new(a.degrees()), a);
        }
        assert_eq!(Angle::new(180.0).degrees(), 0.0);
        assert_eq!(Angle::new(225.0).degrees(), 45.0);
    }

    #[test]
    fn singlet_anticorrelation_at_equal_angles() {
        let a = Angle::new(0.0);
        let p_pp = joint_probability(Outcome::Plus, Outcome::Plus, a, a, 1.0).unwrap();
        let p_pm = joint_probability(Outcome::Plus, Outcome::Minus, a, a, 1.0).unwrap();
        assert!(p_pp.abs() < EPS);
        assert!((p_pm - 0.5).abs() < EPS);
    }

    #[test]
    fn joint_probability_at_canonical_offset() {
        // 1/4 * (1 - cos 45 deg)
        let expected = 0.25 * (1.0 - std::f64::consts::FRAC_1_SQRT_2);
        let p = joint_probability(
            Outcome::Plus,
            Outcome::Plus,
            Angle::new(0.0),
            Angle::new(22.5),
            1.0,
        )
        .unwrap();
        assert!((p - expected).abs() < EPS);
        assert!((p - 0.07322).abs() < 5e-6);
    }

    #[test]
    fn joint_probability_monte_carlo_cross_check() {
        // 10^6 draws from the sampler reproduce the (+,+) probability.
        let (a, b, v) = (Angle::new(0.0), Angle::new(22.5), 1.0);
        let p = joint_probability(Outcome::Plus, Outcome::Plus, a, b, v).unwrap();
        let mut rng = seeded(11);
        let n = 1_000_000u64;
        let mut hits = 0u64;
        for _ in 0..n {
            let (i, j) = draw_joint(&mut rng, a, b, v);
            if i == Outcome::Plus && j == Outcome::Plus {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se, "freq {freq} vs p {p}");
    }

    #[test]
    fn rejects_bad_visibility() {
        let a = Angle::new(0.0);
        assert!(joint_probability(Outcome::Plus, Outcome::Plus, a, a, 1.5).is_err());
        assert!(correlation(a, a, -0.1).is_err());
        assert!(qber_from_visibility(2.0).is_err());
        assert!(VisibilityModel::new(0.94, 1.2).is_err());
    }

    #[test]
    fn correlation_examples() {
        let e = correlation(Angle::new(0.0), Angle::new(22.5), 1.0).unwrap();
        assert!((e + std::f64::consts::FRAC_1_SQRT_2).abs() < EPS);
        // v = 0.91: formula value, compared in spec to the measured -0.681
        let e = correlation(Angle::new(0.0), Angle::new(22.5), 0.91).unwrap();
        assert!((e + 0.6434671708797584).abs() < EPS);
        let e = correlation(Angle::new(0.0), Angle::new(0.0), 0.0).unwrap();
        assert!(e.abs() < EPS);
    }

    #[test]
    fn correlation_monte_carlo_cross_check() {
        let (a, b, v) = (Angle::new(10.0), Angle::new(40.0), 0.91);
        let e = correlation(a, b, v).unwrap();
        let mut rng = seeded(5);
        let n = 1_000_000u64;
        let mut sum = 0.0;
        for _ in 0..n {
            let (i, j) = draw_joint(&mut rng, a, b, v);
            sum += i.sign() * j.sign();
        }
        let est = sum / n as f64;
        let se = ((1.0 - e * e) / n as f64).sqrt();
        assert!((est - e).abs() < 4.0 * se);
    }

    #[test]
    fn chsh_examples() {
        let canon = ChshAngles::canonical();
        let s = chsh_value(&canon, 1.0).unwrap();
        assert!((s - 2.0 * std::f64::consts::SQRT_2).abs() < EPS);
        let s = chsh_value(&canon, 0.91).unwrap();
        assert!((s - 2.573868683519033).abs() < 1e-9);
        let degenerate = ChshAngles::new(0.0, 0.0, 0.0, 0.0);
        let s = chsh_value(&degenerate, 1.0).unwrap();
        assert!((s - 2.0).abs() < EPS);
    }

    #[test]
    fn qber_examples() {
        assert_eq!(qber_from_visibility(1.0).unwrap(), 0.0);
        assert!((qber_from_visibility(0.91).unwrap() - 0.045).abs() < EPS);
        assert!((qber_from_visibility(0.8834).unwrap() - 0.0583).abs() < EPS);
    }

    #[test]
    fn visibility_model_endpoints() {
        let m = VisibilityModel::new(0.94, 0.89).unwrap();
        assert!((m.effective(Angle::new(0.0), Angle::new(0.0)) - 0.94).abs() < EPS);
        assert!((m.effective(Angle::new(90.0), Angle::new(90.0)) - 0.94).abs() < 1e-9);
        assert!((m.effective(Angle::new(45.0), Angle::new(45.0)) - 0.89).abs() < 1e-9);
        assert!((m.effective(Angle::new(135.0), Angle::new(135.0)) - 0.89).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_with_half_marginals(
            a in 0.0..180.0f64, b in 0.0..180.0f64, v in 0.0..=1.0f64
        ) {
            let (a, b) = (Angle::new(a), Angle::new(b));
            let mut total = 0.0;
            let mut marginal_plus = 0.0;
            for i in OUTCOMES {
                for j in OUTCOMES {
                    let p = joint_probability(i, j, a, b, v).unwrap();
                    prop_assert!(p >= -1e-15);
                    total += p;
                    if i == Outcome::Plus {
                        marginal_plus += p;
                    }
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!((marginal_plus - 0.5).abs() < 1e-12);
        }

        #[test]
        fn correlation_matches_weighted_sum(
            a in 0.0..180.0f64, b in 0.0..180.0f64, v in 0.0..=1.0f64
        ) {
            let (a, b) = (Angle::new(a), Angle::new(b));
            let mut sum = 0.0;
            for i in OUTCOMES {
                for j in OUTCOMES {
                    sum += i.sign() * j.sign() * joint_probability(i, j, a, b, v).unwrap();
                }
            }
            let e = correlation(a, b, v).unwrap();
            prop_assert!((sum - e).abs() < 1e-12);
            prop_assert!(e.abs() <= v + 1e-12);
        }

        #[test]
        fn chsh_invariant_under_half_turn(
            a in 0.0..180.0f64, ap in 0.0..180.0f64,
            b in 0.0..180.0f64, bp in 0.0..180.0f64,
            v in 0.0..=1.0f64, which in 0usize..4
        ) {
            let base = ChshAngles::new(a, ap, b, bp);
            let mut shifted = [a, ap, b, bp];
            shifted[which] += 180.0;
            let shifted = ChshAngles::new(shifted[0], shifted[1], shifted[2], shifted[3]);
            let s0 = chsh_value(&base, v).unwrap();
            let s1 = chsh_value(&shifted, v).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-12);
        }

        #[test]
        fn chsh_monotone_in_visibility(v in 0.0..1.0f64, dv in 0.001..0.2f64) {
            let canon = ChshAngles::canonical();
            let hi = (v + dv).min(1.0);
            let s_lo = chsh_value(&canon, v).unwrap();
            let s_hi = chsh_value(&canon, hi).unwrap();
            prop_assert!(s_hi >= s_lo);
        }
    }
}
