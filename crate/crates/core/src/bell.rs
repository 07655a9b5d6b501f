//! Correlation and CHSH estimation with uncertainty propagation, plus
//! polarization-fringe visibility scans with sinusoidal fits.

use serde::{Deserialize, Serialize};

use crate::coincidence::{match_events, CountMatrix, NormalizedMatrix};
use crate::error::{Error, Result};
use crate::link::{simulate_run, AnalyzerSetting, LinkConfig};
use crate::polarization::{Angle, Outcome};
use crate::rng::derive_seed;

/// A correlation coefficient estimated from coincidence counts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub e_value: f64,
    pub sigma: f64,
    pub settings: (Angle, Angle),
    pub total: u64,
}

/// E = (n++ + n-- - n+- - n-+) / total with first-order Poisson error
/// propagation: sigma = 2 * sqrt(n_same * n_diff / total^3).
pub fn estimate_correlation(matrix: &CountMatrix) -> Result<CorrelationEstimate> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::ZeroTotal);
    }
    let n_same = (matrix.n[0][0] + matrix.n[1][1]) as f64;
    let n_diff = (matrix.n[0][1] + matrix.n[1][0]) as f64;
    let t = total as f64;
    Ok(CorrelationEstimate {
        e_value: (n_same - n_diff) / t,
        sigma: 2.0 * (n_same * n_diff / (t * t * t)).sqrt(),
        settings: matrix.settings,
        total,
    })
}

/// Same estimator over singles-normalized entries. The normalization
/// preserves the raw total, so the error term keeps its count scale.
pub fn estimate_correlation_normalized(matrix: &NormalizedMatrix) -> Result<CorrelationEstimate> {
    if matrix.total <= 0.0 {
        return Err(Error::ZeroTotal);
    }
    let n_same = matrix.w[0][0] + matrix.w[1][1];
    let n_diff = matrix.w[0][1] + matrix.w[1][0];
    let t = n_same + n_diff;
    Ok(CorrelationEstimate {
        e_value: (n_same - n_diff) / t,
        sigma: 2.0 * (n_same * n_diff / (t * t * t)).sqrt(),
        settings: matrix.settings,
        total: matrix.total.round() as u64,
    })
}

/// CHSH parameter with its propagated uncertainty and the four component
/// estimates in role order (a,b), (a,b'), (a',b), (a',b').
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChshResult {
    pub s_value: f64,
    pub sigma: f64,
    pub components: [CorrelationEstimate; 4],
}

/// Combine four correlation estimates into S = |E1 - E2 + E3 + E4|,
/// sigma by quadrature. The components must arrive in role order and
/// their settings must form a consistent (a, a') x (b, b') grid; the
/// minus sign sits on the (a, b') term.
pub fn compute_chsh(components: [CorrelationEstimate; 4]) -> Result<ChshResult> {
    let [c1, c2, c3, c4] = &components;
    let grid_ok = c1.settings.0 == c2.settings.0
        && c3.settings.0 == c4.settings.0
        && c1.settings.1 == c3.settings.1
        && c2.settings.1 == c4.settings.1;
    if !grid_ok {
        return Err(Error::RoleMismatch(format!(
            "settings {:?}, {:?}, {:?}, {:?}",
            c1.settings, c2.settings, c3.settings, c4.settings
        )));
    }
    let s_value = (c1.e_value - c2.e_value + c3.e_value + c4.e_value).abs();
    let sigma = components.iter().map(|c| c.sigma * c.sigma).sum::<f64>().sqrt();
    Ok(ChshResult { s_value, sigma, components })
}

/// Standard deviations by which S exceeds the classical bound of 2.
/// With sigma = 0 the significance is +/- infinity on either side of the
/// bound (0 exactly at it).
pub fn violation_significance(result: &ChshResult) -> f64 {
    let excess = result.s_value - 2.0;
    if result.sigma == 0.0 {
        return if excess > 0.0 {
            f64::INFINITY
        } else if excess < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
    }
    excess / result.sigma
}

/// A fitted polarization fringe N(theta) = baseline * (1 - v * cos 2(theta - phase)).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FringeFit {
    pub baseline: f64,
    pub visibility: f64,
    pub phase_deg: f64,
}

/// Least-squares weighting for fringe fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWeighting {
    /// Plain least squares on counts.
    Unweighted,
    /// Inverse-variance weights assuming Poisson counts (weight 1/max(N,1)).
    Poisson,
}

impl Default for FitWeighting {
    fn default() -> Self {
        FitWeighting::Unweighted
    }
}

/// Fit counts-vs-angle data to a polarization fringe. Linear least
/// squares on the basis (1, cos 2theta, sin 2theta); the fitted
/// visibility equals (N_max - N_min) / (N_max + N_min) of the fitted
/// curve. Angles in degrees.
pub fn fit_fringe(points: &[(f64, f64)], weighting: FitWeighting) -> Result<FringeFit> {
    if points.len() < 3 {
        return Err(Error::FitSingular);
    }
    // Normal equations A^T W A x = A^T W y for x = (c0, c1, c2).
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(deg, y) in points {
        let t = 2.0 * deg.to_radians();
        let row = [1.0, t.cos(), t.sin()];
        let w = match weighting {
            FitWeighting::Unweighted => 1.0,
            FitWeighting::Poisson => 1.0 / y.max(1.0),
        };
        for r in 0..3 {
            for c in 0..3 {
                ata[r][c] += w * row[r] * row[c];
            }
            aty[r] += w * row[r] * y;
        }
    }
    let x = solve3(ata, aty)?;
    let (c0, c1, c2) = (x[0], x[1], x[2]);
    if c0.abs() < f64::EPSILON {
        return Err(Error::FitSingular);
    }
    let amplitude = (c1 * c1 + c2 * c2).sqrt();
    //  N = c0 + c1 cos 2t + c2 sin 2t = c0 (1 - V cos 2(t - t0))
    let phase = 0.5 * f64::atan2(-c2, -c1);
    Ok(FringeFit {
        baseline: c0,
        visibility: amplitude / c0,
        phase_deg: phase.to_degrees().rem_euclid(180.0),
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 * scale.max(1.0) {
            return Err(Error::FitSingular);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// One measured and fitted fringe of a visibility scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanCurve {
    pub bob_angle_deg: f64,
    /// (alice_angle_deg, coincidence count in the (+,+) channel).
    pub points: Vec<(f64, u64)>,
    pub fit: Option<FringeFit>,
    pub fit_error: Option<String>,
}

/// Coincidence fringes versus Alice's polarizer angle, one curve per Bob
/// setting. Each point is an independent simulated run of
/// `config.duration` seconds with a derived seed; the receivers act as
/// fixed single-angle polarizers and the (+,+) coincidences are counted.
pub fn visibility_scan(
    config: &LinkConfig,
    bob_angles: &[Angle],
    alice_angles: &[Angle],
    weighting: FitWeighting,
) -> Result<Vec<ScanCurve>> {
    if alice_angles.len() < 8 {
        return Err(Error::InvalidConfig(format!(
            "visibility scan needs at least 8 sweep points, got {}",
            alice_angles.len()
        )));
    }
    let mut curves = Vec::with_capacity(bob_angles.len());
    for (ci, &bob) in bob_angles.iter().enumerate() {
        let mut points = Vec::with_capacity(alice_angles.len());
        for (pi, &alice) in alice_angles.iter().enumerate() {
            let mut point_cfg = config.clone();
            point_cfg.settings_alice = AnalyzerSetting::fixed(alice.degrees());
            point_cfg.settings_bob = AnalyzerSetting::fixed(bob.degrees());
            point_cfg.seed =
                derive_seed(config.seed, "scan", ((ci as u64) << 32) | pi as u64);
            let run = simulate_run(&point_cfg)?;
            let records = match_events(
                &run.alice,
                &run.bob,
                point_cfg.window,
                &point_cfg.settings_alice,
                &point_cfg.settings_bob,
            )?;
            let count = records
                .iter()
                .filter(|r| {
                    r.alice_outcome == Outcome::Plus && r.bob_outcome == Outcome::Plus
                })
                .count() as u64;
            points.push((alice.degrees(), count));
        }
        let data: Vec<(f64, f64)> = points.iter().map(|&(a, n)| (a, n as f64)).collect();
        let curve = match fit_fringe(&data, weighting) {
            Ok(fit) => ScanCurve {
                bob_angle_deg: bob.degrees(),
                points,
                fit: Some(fit),
                fit_error: None,
            },
            Err(e) => ScanCurve {
                bob_angle_deg: bob.degrees(),
                points,
                fit: None,
                fit_error: Some(e.to_string()),
            },
        };
        curves.push(curve);
    }
    Ok(curves)
}
