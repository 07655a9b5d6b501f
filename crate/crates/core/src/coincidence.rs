//! Pulse-referenced coincidence matching and count-matrix accumulation.
//!
//! Two clicks coincide when they reference the same sync pulse and their
//! pulse offsets differ by at most half the (full-width) window. Because
//! offsets are measured against locally received pulses that traveled the
//! same path as the photons, a constant inter-arm skew cancels; only
//! jitter survives in the offset difference.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::link::{
    singles_counts, simulate_run, AnalyzerSetting, LinkConfig, TimeTaggedEvent,
};
use crate::polarization::{Angle, Outcome};
use crate::rng::derive_seed;

/// One matched pair of clicks with the resolved analyzer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceRecord {
    pub alice_event: TimeTaggedEvent,
    pub bob_event: TimeTaggedEvent,
    /// Positions of the two events in their input streams.
    pub alice_index: usize,
    pub bob_index: usize,
    /// Offset difference alice - bob, seconds.
    pub delta: f64,
    pub alice_angle: Angle,
    pub bob_angle: Angle,
    pub alice_outcome: Outcome,
    pub bob_outcome: Outcome,
}

impl CoincidenceRecord {
    pub fn setting_pair(&self) -> (Angle, Angle) {
        (self.alice_angle, self.bob_angle)
    }
}

fn check_sorted(events: &[TimeTaggedEvent]) -> Result<()> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].time < w[0].time {
            return Err(Error::UnsortedEvents(i + 1));
        }
    }
    Ok(())
}

/// Match two time-sorted streams. Greedy earliest-first within each pulse
/// group: events pair when pulse indices are equal and |offset difference|
/// is at most `window / 2`; each event is used at most once. Output is
/// sorted by Alice time. Symmetric under swapping the streams.
pub fn match_events(
    alice: &[TimeTaggedEvent],
    bob: &[TimeTaggedEvent],
    window: f64,
    analyzer_alice: &AnalyzerSetting,
    analyzer_bob: &AnalyzerSetting,
) -> Result<Vec<CoincidenceRecord>> {
    if !(window > 0.0) {
        return Err(Error::InvalidConfig(format!("window must be > 0, got {window}")));
    }
    check_sorted(alice)?;
    check_sorted(bob)?;
    let half = window / 2.0;

    let mut records = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    while i < alice.len() && j < bob.len() {
        let pa = alice[i].pulse_index;
        let pb = bob[j].pulse_index;
        if pa < pb {
            i += 1;
            continue;
        }
        if pb < pa {
            j += 1;
            continue;
        }
        let i_end = alice[i..].iter().take_while(|e| e.pulse_index == pa).count() + i;
        let j_end = bob[j..].iter().take_while(|e| e.pulse_index == pa).count() + j;
        let (mut x, mut y) = (i, j);
        while x < i_end && y < j_end {
            let d = alice[x].offset - bob[y].offset;
            if d.abs() <= half {
                let ev_a = alice[x];
                let ev_b = bob[y];
                records.push(CoincidenceRecord {
                    alice_event: ev_a,
                    bob_event: ev_b,
                    alice_index: x,
                    bob_index: y,
                    delta: d,
                    alice_angle: analyzer_alice.angle(ev_a.basis_index()),
                    bob_angle: analyzer_bob.angle(ev_b.basis_index()),
                    alice_outcome: ev_a.outcome(),
                    bob_outcome: ev_b.outcome(),
                });
                x += 1;
                y += 1;
            } else if d < 0.0 {
                x += 1;
            } else {
                y += 1;
            }
        }
        i = i_end;
        j = j_end;
    }
    Ok(records)
}

/// Expected accidental coincidence rate for uncorrelated streams:
/// `singles_alice * singles_bob * window` (full-width window convention,
/// matching the `|delta| <= window / 2` acceptance of [`match_events`]).
pub fn accidental_rate(singles_alice: f64, singles_bob: f64, window: f64) -> f64 {
    assert!(singles_alice >= 0.0 && singles_bob >= 0.0 && window >= 0.0);
    singles_alice * singles_bob * window
}

/// Coincidence counts for one setting pair, with the singles needed for
/// detector-efficiency normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountMatrix {
    /// n[i][j]: coincidences with Alice outcome i (0 = Plus) and Bob outcome j.
    pub n: [[u64; 2]; 2],
    pub settings: (Angle, Angle),
    /// Singles on the involved detectors at each receiver, by outcome port.
    pub singles_alice: [u64; 2],
    pub singles_bob: [u64; 2],
    pub duration: f64,
}

impl CountMatrix {
    /// Accumulate counts over the records matching `settings`. Singles are
    /// taken per stream and summed over the detectors whose analyzer angle
    /// equals the respective setting.
    pub fn from_records(
        records: &[CoincidenceRecord],
        settings: (Angle, Angle),
        analyzer_alice: &AnalyzerSetting,
        analyzer_bob: &AnalyzerSetting,
        stream_singles_alice: &[u64; 4],
        stream_singles_bob: &[u64; 4],
        duration: f64,
    ) -> CountMatrix {
        let mut n = [[0u64; 2]; 2];
        for r in records {
            if r.alice_angle == settings.0 && r.bob_angle == settings.1 {
                n[r.alice_outcome.index()][r.bob_outcome.index()] += 1;
            }
        }
        let mut singles_alice = [0u64; 2];
        let mut singles_bob = [0u64; 2];
        for d in 0..4usize {
            if analyzer_alice.angle(d >> 1) == settings.0 {
                singles_alice[d & 1] += stream_singles_alice[d];
            }
            if analyzer_bob.angle(d >> 1) == settings.1 {
                singles_bob[d & 1] += stream_singles_bob[d];
            }
        }
        CountMatrix { n, settings, singles_alice, singles_bob, duration }
    }

    pub fn total(&self) -> u64 {
        self.n.iter().flatten().sum()
    }

    /// Merge counts from another segment of the same run.
    pub fn merge(&mut self, other: &CountMatrix) {
        for i in 0..2 {
            for j in 0..2 {
                self.n[i][j] += other.n[i][j];
            }
            self.singles_alice[i] += other.singles_alice[i];
            self.singles_bob[i] += other.singles_bob[i];
        }
        self.duration += other.duration;
    }

    /// Singles-normalized counts: entry (i, j) is divided by the singles
    /// share of Alice's detector i times the share of Bob's detector j,
    /// then the whole matrix is rescaled to preserve the raw total. With
    /// balanced detectors this is the identity.
    pub fn normalize(&self) -> Result<NormalizedMatrix> {
        for (rcv, singles) in
            [("alice", &self.singles_alice), ("bob", &self.singles_bob)]
        {
            for (d, &s) in singles.iter().enumerate() {
                if s == 0 {
                    return Err(Error::ZeroSingles { receiver: rcv, detector: d as u8 });
                }
            }
        }
        let share = |s: &[u64; 2], i: usize| s[i] as f64 / (s[0] + s[1]) as f64;
        let mut w = [[0.0f64; 2]; 2];
        let mut total_w = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                w[i][j] =
                    self.n[i][j] as f64 / (share(&self.singles_alice, i) * share(&self.singles_bob, j));
                total_w += w[i][j];
            }
        }
        let total_n = self.total() as f64;
        if total_w > 0.0 {
            let scale = total_n / total_w;
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
        }
        Ok(NormalizedMatrix { w, settings: self.settings, total: total_n })
    }
}

/// Real-valued count matrix after singles normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedMatrix {
    pub w: [[f64; 2]; 2],
    pub settings: (Angle, Angle),
    pub total: f64,
}

impl NormalizedMatrix {
    pub fn correlation(&self) -> f64 {
        let sum: f64 = self.w.iter().flatten().sum();
        (self.w[0][0] + self.w[1][1] - self.w[0][1] - self.w[1][0]) / sum
    }
}

pub const RECORD_CSV_HEADER: &str =
    "pulse_index,delta_ns,alice_detector,bob_detector,alice_time_ns,bob_time_ns";

pub fn write_records_csv<W: Write>(w: &mut W, records: &[CoincidenceRecord]) -> Result<()> {
    writeln!(w, "{RECORD_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{:.3},{},{},{:.3},{:.3}",
            r.alice_event.pulse_index,
            r.delta * 1e9,
            r.alice_event.detector,
            r.bob_event.detector,
            r.alice_event.time * 1e9,
            r.bob_event.time * 1e9
        )?;
    }
    Ok(())
}

/// Coincidence records plus stream summaries from a (possibly chunked)
/// simulated run.
#[derive(Debug, Clone)]
pub struct SimulatedCoincidences {
    pub records: Vec<CoincidenceRecord>,
    pub singles_alice: [u64; 4],
    pub singles_bob: [u64; 4],
    pub duration: f64,
}

/// Simulate a run and match coincidences, processing the timeline in
/// chunks so long runs never hold the full click streams in memory.
///
/// Chunk boundaries are aligned to whole sync-pulse periods; since
/// matching never crosses pulse indices, the result is equivalent to
/// matching one monolithic run of the same per-chunk event content.
/// Record times and pulse indices are shifted to the global timeline.
pub fn simulate_coincidences(
    config: &LinkConfig,
    chunk_seconds: f64,
) -> Result<SimulatedCoincidences> {
    config.validate()?;
    if !(chunk_seconds > 0.0) {
        return Err(Error::InvalidConfig("chunk_seconds must be > 0".into()));
    }
    let period = config.sync_period();
    let pulses_per_chunk = (chunk_seconds / period).round().max(1.0);
    let chunk_len = pulses_per_chunk * period;

    let mut out = SimulatedCoincidences {
        records: Vec::new(),
        singles_alice: [0; 4],
        singles_bob: [0; 4],
        duration: config.duration,
    };
    let mut start = 0.0f64;
    let mut chunk_idx = 0u64;
    while start < config.duration {
        let len = chunk_len.min(config.duration - start);
        let mut chunk_cfg = config.clone();
        chunk_cfg.duration = len;
        chunk_cfg.seed = derive_seed(config.seed, "chunk", chunk_idx);
        chunk_cfg.max_events = config.max_events;
        let run = simulate_run(&chunk_cfg)?;
        let sa = singles_counts(&run.alice);
        let sb = singles_counts(&run.bob);
        for d in 0..4 {
            out.singles_alice[d] += sa[d];
            out.singles_bob[d] += sb[d];
        }
        let mut records = match_events(
            &run.alice,
            &run.bob,
            config.window,
            &config.settings_alice,
            &config.settings_bob,
        )?;
        let pulse_shift = chunk_idx * pulses_per_chunk as u64;
        let time_shift = start;
        for r in records.iter_mut() {
            r.alice_event.pulse_index += pulse_shift;
            r.bob_event.pulse_index += pulse_shift;
            r.alice_event.time += time_shift;
            r.bob_event.time += time_shift;
        }
        out.records.extend(records);
        start += len;
        chunk_idx += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::Receiver;
    use crate::polarization::{correlation, VisibilityModel};

    fn event(receiver: Receiver, detector: u8, pulse_index: u64, offset_ns: f64) -> TimeTaggedEvent {
        TimeTaggedEvent {
            receiver,
            detector,
            time: pulse_index as f64 * 1e-4 + offset_ns * 1e-9,
            pulse_index,
            offset: offset_ns * 1e-9,
        }
    }

    fn analyzers() -> (AnalyzerSetting, AnalyzerSetting) {
        (AnalyzerSetting::new(0.0, 45.0), AnalyzerSetting::new(22.5, 67.5))
    }

    #[test]
    fn window_accepts_and_rejects() {
        let (sa, sb) = analyzers();
        let a = vec![event(Receiver::Alice, 0, 5, 10.0)];
        let b = vec![event(Receiver::Bob, 2, 5, 15.0)];
        let recs = match_events(&a, &b, 20e-9, &sa, &sb).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].delta + 5e-9).abs() < 1e-15);

        let b = vec![event(Receiver::Bob, 2, 5, 35.0)];
        let recs = match_events(&a, &b, 20e-9, &sa, &sb).unwrap();
        assert_eq!(recs.len(), 0);

        // Same offsets but different pulse never match.
        let b = vec![event(Receiver::Bob, 2, 6, 10.0)];
        let recs = match_events(&a, &b, 20e-9, &sa, &sb).unwrap();
        assert_eq!(recs.len(), 0);
    }

    #[test]
    fn unsorted_input_rejected() {
        let (sa, sb) = analyzers();
        let a = vec![event(Receiver::Alice, 0, 5, 10.0), event(Receiver::Alice, 0, 4, 0.0)];
        let b = vec![event(Receiver::Bob, 0, 5, 10.0)];
        assert!(matches!(
            match_events(&a, &b, 20e-9, &sa, &sb),
            Err(Error::UnsortedEvents(_))
        ));
    }

    #[test]
    fn greedy_is_symmetric_and_single_use() {
        let (sa, sb) = analyzers();
        let a = vec![
            event(Receiver::Alice, 0, 1, 0.0),
            event(Receiver::Alice, 1, 1, 8.0),
            event(Receiver::Alice, 2, 1, 40.0),
        ];
        let b = vec![
            event(Receiver::Bob, 0, 1, 4.0),
            event(Receiver::Bob, 3, 1, 47.0),
            event(Receiver::Bob, 1, 1, 80.0),
        ];
        let fwd = match_events(&a, &b, 20e-9, &sa, &sb).unwrap();
        let rev = match_events(&b, &a, 20e-9, &sb, &sa).unwrap();
        assert_eq!(fwd.len(), rev.len());
        for (f, r) in fwd.iter().zip(&rev) {
            assert_eq!(f.alice_event, r.bob_event);
            assert_eq!(f.bob_event, r.alice_event);
            assert!((f.delta + r.delta).abs() < 1e-18);
        }
        assert!(fwd.len() <= a.len().min(b.len()));
        let mut used_a: Vec<usize> = fwd.iter().map(|r| r.alice_index).collect();
        used_a.dedup();
        assert_eq!(used_a.len(), fwd.len());
    }

    #[test]
    fn accidental_rate_examples() {
        assert!((accidental_rate(40_000.0, 18_000.0, 20e-9) - 14.4).abs() < 1e-9);
        assert_eq!(accidental_rate(0.0, 123.0, 20e-9), 0.0);
        assert!((accidental_rate(1e5, 1e5, 10e-9) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pure_background_reproduces_accidental_formula() {
        let config = LinkConfig {
            pair_rate: 0.0,
            arm_efficiency_alice: 0.0,
            arm_efficiency_bob: 0.0,
            background_rate_alice: 18_000.0,
            background_rate_bob: 40_000.0,
            duration: 10.0,
            seed: 40,
            visibility: VisibilityModel::new(0.94, 0.89).unwrap(),
            settings_alice: AnalyzerSetting::new(0.0, 45.0),
            settings_bob: AnalyzerSetting::new(22.5, 67.5),
            ..crate::link::tests::base_config()
        };
        let run = simulate_run(&config).unwrap();
        let recs = match_events(
            &run.alice,
            &run.bob,
            config.window,
            &config.settings_alice,
            &config.settings_bob,
        )
        .unwrap();
        let expected = accidental_rate(18_000.0, 40_000.0, config.window) * config.duration;
        let sigma = expected.sqrt();
        assert!(
            ((recs.len() as f64) - expected).abs() < 4.0 * sigma,
            "{} vs {expected}",
            recs.len()
        );
    }

    #[test]
    fn accumulate_empty_and_unit_records() {
        let (sa, sb) = analyzers();
        let settings = (Angle::new(0.0), Angle::new(22.5));
        let m = CountMatrix::from_records(&[], settings, &sa, &sb, &[0; 4], &[0; 4], 1.0);
        assert_eq!(m.n, [[0, 0], [0, 0]]);
        assert_eq!(m.total(), 0);

        // One record per outcome pair, all at basis (0, 0).
        let mut records = Vec::new();
        for (da, db) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
            let a = event(Receiver::Alice, da, 1, 0.0);
            let b = event(Receiver::Bob, db, 1, 0.0);
            records.push(CoincidenceRecord {
                alice_event: a,
                bob_event: b,
                alice_index: 0,
                bob_index: 0,
                delta: 0.0,
                alice_angle: sa.angle(0),
                bob_angle: sb.angle(0),
                alice_outcome: a.outcome(),
                bob_outcome: b.outcome(),
            });
        }
        let m =
            CountMatrix::from_records(&records, settings, &sa, &sb, &[1, 1, 1, 1], &[1, 1, 1, 1], 1.0);
        assert_eq!(m.n, [[1, 1], [1, 1]]);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn jitter_free_match_recovers_ground_truth() {
        let mut config = crate::link::tests::base_config();
        config.jitter_sigma = 0.0;
        config.arm_efficiency_alice = 0.8;
        config.arm_efficiency_bob = 0.6;
        config.duration = 1.0;
        config.seed = 3;
        let run = simulate_run(&config).unwrap();
        let recs = match_events(
            &run.alice,
            &run.bob,
            config.window,
            &config.settings_alice,
            &config.settings_bob,
        )
        .unwrap();
        let matched: Vec<(usize, usize)> =
            recs.iter().map(|r| (r.alice_index, r.bob_index)).collect();
        assert_eq!(matched, run.truth);
    }

    #[test]
    fn simulated_correlation_matches_oracle() {
        // Canonical-settings run at uniform v = 0.91, no background: the
        // (0, 22.5) matrix estimate sits within 4 sigma of -v cos 45.
        let mut config = crate::link::tests::base_config();
        config.visibility = VisibilityModel::uniform(0.91).unwrap();
        config.duration = 8.0;
        config.seed = 17;
        let run = simulate_run(&config).unwrap();
        let recs = match_events(
            &run.alice,
            &run.bob,
            config.window,
            &config.settings_alice,
            &config.settings_bob,
        )
        .unwrap();
        let m = CountMatrix::from_records(
            &recs,
            (Angle::new(0.0), Angle::new(22.5)),
            &config.settings_alice,
            &config.settings_bob,
            &singles_counts(&run.alice),
            &singles_counts(&run.bob),
            config.duration,
        );
        let total = m.total() as f64;
        let e = (m.n[0][0] + m.n[1][1]) as f64 / total - (m.n[0][1] + m.n[1][0]) as f64 / total;
        let oracle = correlation(Angle::new(0.0), Angle::new(22.5), 0.91).unwrap();
        let se = ((1.0 - oracle * oracle) / total).sqrt();
        assert!((e - oracle).abs() < 4.0 * se, "e {e} vs oracle {oracle} (se {se})");
    }

    #[test]
    fn normalization_identity_and_rebalance() {
        let (sa, sb) = analyzers();
        let settings = (Angle::new(0.0), Angle::new(22.5));
        let base = CountMatrix {
            n: [[2, 2], [1, 1]],
            settings,
            singles_alice: [100, 100],
            singles_bob: [100, 100],
            duration: 1.0,
        };
        let norm = base.normalize().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((norm.w[i][j] - base.n[i][j] as f64).abs() < 1e-12);
            }
        }

        // Alice's Plus detector sees twice the singles: ((2,2),(1,1))
        // normalizes to a flat matrix (up to the preserved total).
        let skew = CountMatrix { singles_alice: [200, 100], ..base.clone() };
        let norm = skew.normalize().unwrap();
        let expect = skew.total() as f64 / 4.0;
        for i in 0..2 {
            for j in 0..2 {
                assert!((norm.w[i][j] - expect).abs() < 1e-12, "{:?}", norm.w);
            }
        }
        let _ = (sa, sb);
    }

    #[test]
    fn normalization_zero_singles_rejected() {
        let m = CountMatrix {
            n: [[1, 1], [1, 1]],
            settings: (Angle::new(0.0), Angle::new(22.5)),
            singles_alice: [10, 0],
            singles_bob: [10, 10],
            duration: 1.0,
        };
        assert!(matches!(m.normalize(), Err(Error::ZeroSingles { .. })));
    }

    #[test]
    fn normalized_correlation_cancels_coupler_imbalance() {
        let mut config = crate::link::tests::base_config();
        config.visibility = VisibilityModel::uniform(0.91).unwrap();
        config.coupler_efficiencies_alice = [1.0, 0.8, 0.9, 0.7];
        config.coupler_efficiencies_bob = [1.0, 0.8, 0.9, 0.7];
        config.duration = 12.0;
        config.seed = 23;
        let run = simulate_run(&config).unwrap();
        let recs = match_events(
            &run.alice,
            &run.bob,
            config.window,
            &config.settings_alice,
            &config.settings_bob,
        )
        .unwrap();
        let settings = (Angle::new(0.0), Angle::new(22.5));
        let m = CountMatrix::from_records(
            &recs,
            settings,
            &config.settings_alice,
            &config.settings_bob,
            &singles_counts(&run.alice),
            &singles_counts(&run.bob),
            config.duration,
        );
        let oracle = correlation(settings.0, settings.1, 0.91).unwrap();
        let e_norm = m.normalize().unwrap().correlation();
        let se = ((1.0 - oracle * oracle) / m.total() as f64).sqrt();
        assert!(
            (e_norm - oracle).abs() < 4.0 * se,
            "normalized e {e_norm} vs oracle {oracle} (se {se})"
        );
    }

    #[test]
    fn chunked_simulation_matches_totals() {
        let mut config = crate::link::tests::base_config();
        config.background_rate_alice = 2_000.0;
        config.background_rate_bob = 2_000.0;
        config.duration = 2.0;
        config.seed = 77;
        let out = simulate_coincidences(&config, 0.5).unwrap();
        // Rates agree with a monolithic run at the statistical level.
        let expected_singles_a = config.duration
            * (config.pair_rate * config.arm_efficiency_alice + config.background_rate_alice);
        let got: u64 = out.singles_alice.iter().sum();
        assert!((got as f64 - expected_singles_a).abs() < 4.0 * expected_singles_a.sqrt());
        // Pulse indices strictly increase across chunk boundaries.
        for w in out.records.windows(2) {
            assert!(w[0].alice_event.pulse_index <= w[1].alice_event.pulse_index);
        }
        assert_eq!(out.duration, config.duration);
    }
}
