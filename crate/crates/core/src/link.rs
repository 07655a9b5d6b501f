//! Seeded Monte-Carlo generation of time-tagged detector events at the
//! two receivers.
//!
//! The source emits photon pairs as a Poisson process. Each photon
//! independently survives its arm, picks a measurement basis at a passive
//! splitter, and lands on one of four detectors (basis x port). Click
//! times carry a fixed per-arm propagation delay plus Gaussian jitter.
//! Background clicks are an independent Poisson process per receiver,
//! uniform over the four detectors. Bright sync pulses travel the same
//! path as the photons, so every click is also tagged with the index of
//! and offset to the last locally received pulse; downstream coincidence
//! matching works entirely on those offsets, which cancels the constant
//! inter-arm skew.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::polarization::{draw_joint, Angle, Outcome, VisibilityModel};
use crate::rng::{derive_seed, seeded, Rng};

/// Which receiver a click belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Receiver {
    Alice,
    Bob,
}

impl Receiver {
    pub fn as_str(self) -> &'static str {
        match self {
            Receiver::Alice => "alice",
            Receiver::Bob => "bob",
        }
    }
}

/// A receiver's analyzer: a passive splitter feeding two polarization
/// bases, four detectors total. Detector `d` encodes basis `d >> 1` and
/// outcome port `d & 1` (0 = Plus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub basis_angles: [Angle; 2],
    #[serde(default = "default_splitter_ratio")]
    pub splitter_ratio: f64,
}

fn default_splitter_ratio() -> f64 {
    0.5
}

impl AnalyzerSetting {
    pub fn new(basis_0: f64, basis_1: f64) -> Self {
        AnalyzerSetting {
            basis_angles: [Angle::new(basis_0), Angle::new(basis_1)],
            splitter_ratio: 0.5,
        }
    }

    /// Both splitter arms aligned to the same angle; used for fringe scans
    /// where the receiver acts as a single rotating polarizer.
    pub fn fixed(angle: f64) -> Self {
        AnalyzerSetting::new(angle, angle)
    }

    pub fn angle(&self, basis: usize) -> Angle {
        self.basis_angles[basis & 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.splitter_ratio > 0.0 && self.splitter_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "splitter_ratio {} outside (0, 1)",
                self.splitter_ratio
            )));
        }
        Ok(())
    }
}

/// One detector click.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTaggedEvent {
    pub receiver: Receiver,
    /// Detector 0..=3: basis = detector >> 1, outcome port = detector & 1.
    pub detector: u8,
    /// Seconds since run start, on the receiver's local clock.
    pub time: f64,
    /// Index of the last sync pulse received before this click.
    pub pulse_index: u64,
    /// Seconds since that pulse; in [0, 1/sync_pulse_rate).
    pub offset: f64,
}

impl TimeTaggedEvent {
    pub fn basis_index(&self) -> usize {
        (self.detector >> 1) as usize
    }

    pub fn outcome(&self) -> Outcome {
        Outcome::from_index(self.detector as usize & 1)
    }
}

/// Full physical description of one simulated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Entangled pairs per second at the source.
    pub pair_rate: f64,
    /// Combined optics + coupling + detector efficiency per arm.
    pub arm_efficiency_alice: f64,
    pub arm_efficiency_bob: f64,
    /// Uncorrelated clicks per second per receiver, uniform over detectors.
    #[serde(default)]
    pub background_rate_alice: f64,
    #[serde(default)]
    pub background_rate_bob: f64,
    /// Per-detector coupler efficiencies; 1.0 means perfectly balanced.
    #[serde(default = "default_couplers")]
    pub coupler_efficiencies_alice: [f64; 4],
    #[serde(default = "default_couplers")]
    pub coupler_efficiencies_bob: [f64; 4],
    /// Sync laser pulses per second.
    #[serde(default = "default_sync_rate")]
    pub sync_pulse_rate: f64,
    /// Per-receiver Gaussian timing jitter, seconds.
    #[serde(default = "default_jitter")]
    pub jitter_sigma: f64,
    /// Full coincidence window width, seconds; matches accept |dt| <= window/2.
    #[serde(default = "default_window")]
    pub window: f64,
    pub visibility: VisibilityModel,
    pub settings_alice: AnalyzerSetting,
    pub settings_bob: AnalyzerSetting,
    /// Fixed propagation delay per arm, seconds. The defaults correspond
    /// to 7.7 km and 5.3 km of free space, an ~8 us skew that the sync
    /// referencing must cancel.
    #[serde(default = "default_delay_alice")]
    pub path_delay_alice: f64,
    #[serde(default = "default_delay_bob")]
    pub path_delay_bob: f64,
    /// Run length, seconds.
    pub duration: f64,
    pub seed: u64,
    /// Reject configs whose expected event count exceeds this.
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

fn default_couplers() -> [f64; 4] {
    [1.0; 4]
}
fn default_sync_rate() -> f64 {
    10_000.0
}
fn default_jitter() -> f64 {
    3e-9
}
fn default_window() -> f64 {
    20e-9
}
fn default_delay_alice() -> f64 {
    7_700.0 / 299_792_458.0
}
fn default_delay_bob() -> f64 {
    5_300.0 / 299_792_458.0
}
fn default_max_events() -> u64 {
    20_000_000
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("pair_rate", self.pair_rate),
            ("background_rate_alice", self.background_rate_alice),
            ("background_rate_bob", self.background_rate_bob),
            ("jitter_sigma", self.jitter_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        let fractions = [
            ("arm_efficiency_alice", self.arm_efficiency_alice),
            ("arm_efficiency_bob", self.arm_efficiency_bob),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        for (name, effs) in [
            ("coupler_efficiencies_alice", &self.coupler_efficiencies_alice),
            ("coupler_efficiencies_bob", &self.coupler_efficiencies_bob),
        ] {
            for &e in effs.iter() {
                if !(0.0..=1.0).contains(&e) {
                    return Err(Error::InvalidConfig(format!("{name} entry {e} outside [0, 1]")));
                }
            }
        }
        if !(self.window > 0.0) {
            return Err(Error::InvalidConfig(format!("window must be > 0, got {}", self.window)));
        }
        if !(self.duration > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "duration must be > 0, got {}",
                self.duration
            )));
        }
        if !(self.sync_pulse_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sync_pulse_rate must be > 0, got {}",
                self.sync_pulse_rate
            )));
        }
        if !(self.path_delay_alice >= 0.0 && self.path_delay_bob >= 0.0) {
            return Err(Error::InvalidConfig("path delays must be >= 0".into()));
        }
        self.settings_alice.validate()?;
        self.settings_bob.validate()?;
        VisibilityModel::new(self.visibility.v_hv, self.visibility.v_diag)?;
        let expected = self.expected_events();
        if expected > self.max_events as f64 {
            return Err(Error::EventBudget { expected, cap: self.max_events });
        }
        Ok(())
    }

    /// Expected number of clicks across both receivers (pre-coupler bound).
    pub fn expected_events(&self) -> f64 {
        self.duration
            * (self.pair_rate * (self.arm_efficiency_alice + self.arm_efficiency_bob)
                + self.background_rate_alice
                + self.background_rate_bob)
    }

    pub fn sync_period(&self) -> f64 {
        1.0 / self.sync_pulse_rate
    }
}

/// Output of one simulated run: the two time-sorted click streams plus
/// the ground-truth pairing table (indices into the sorted streams for
/// every entangled pair that produced a click on both sides).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub alice: Vec<TimeTaggedEvent>,
    pub bob: Vec<TimeTaggedEvent>,
    pub truth: Vec<(usize, usize)>,
}

struct Draft {
    time: f64,
    detector: u8,
    tag: u32,
}

/// Thin a click stream by per-detector coupler efficiency: each event is
/// kept with probability `efficiencies[detector]`. Efficiency 1 retains
/// everything. Panics if an efficiency lies outside [0, 1].
pub fn apply_coupler_imbalance(
    events: &[TimeTaggedEvent],
    efficiencies: &[f64; 4],
    rng: &mut Rng,
) -> Vec<TimeTaggedEvent> {
    assert!(
        efficiencies.iter().all(|e| (0.0..=1.0).contains(e)),
        "coupler efficiencies must be in [0, 1]"
    );
    events
        .iter()
        .filter(|ev| {
            let eff = efficiencies[ev.detector as usize];
            eff >= 1.0 || rng.gen::<f64>() < eff
        })
        .copied()
        .collect()
}

fn thin_drafts(drafts: Vec<Draft>, efficiencies: &[f64; 4], rng: &mut Rng) -> Vec<Draft> {
    if efficiencies.iter().all(|&e| e >= 1.0) {
        return drafts;
    }
    drafts
        .into_iter()
        .filter(|d| {
            let eff = efficiencies[d.detector as usize];
            eff >= 1.0 || rng.gen::<f64>() < eff
        })
        .collect()
}

/// Simulate one run. Deterministic given `config.seed`.
pub fn simulate_run(config: &LinkConfig) -> Result<RunOutput> {
    config.validate()?;

    let mut rng_pairs = seeded(derive_seed(config.seed, "link/pairs", 0));
    let mut rng_alice = seeded(derive_seed(config.seed, "link/alice", 0));
    let mut rng_bob = seeded(derive_seed(config.seed, "link/bob", 0));
    let mut rng_bg_a = seeded(derive_seed(config.seed, "link/bg-alice", 0));
    let mut rng_bg_b = seeded(derive_seed(config.seed, "link/bg-bob", 0));
    let mut rng_cpl_a = seeded(derive_seed(config.seed, "link/coupler-alice", 0));
    let mut rng_cpl_b = seeded(derive_seed(config.seed, "link/coupler-bob", 0));

    let jitter = if config.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, config.jitter_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut alice: Vec<Draft> = Vec::new();
    let mut bob: Vec<Draft> = Vec::new();
    let mut pair_links: Vec<(u32, u32)> = Vec::new();
    let mut next_tag_a: u32 = 0;
    let mut next_tag_b: u32 = 0;

    // Photon pairs: Poisson arrivals at the source, independent arm
    // survival, passive basis choice, joint outcome draw.
    if config.pair_rate > 0.0 {
        let exp = Exp::new(config.pair_rate).expect("positive rate");
        let mut t = 0.0f64;
        loop {
            t += exp.sample(&mut rng_pairs);
            if t >= config.duration {
                break;
            }
            let alive_a = rng_alice.gen::<f64>() < config.arm_efficiency_alice;
            let alive_b = rng_bob.gen::<f64>() < config.arm_efficiency_bob;
            if !alive_a && !alive_b {
                continue;
            }
            let mut det_a = 0u8;
            let mut time_a = 0.0f64;
            if alive_a {
                let basis = usize::from(rng_alice.gen::<f64>() >= config.settings_alice.splitter_ratio);
                let j = jitter.map_or(0.0, |n| n.sample(&mut rng_alice));
                det_a = (basis as u8) << 1;
                time_a = t + config.path_delay_alice + j;
            }
            let mut det_b = 0u8;
            let mut time_b = 0.0f64;
            if alive_b {
                let basis = usize::from(rng_bob.gen::<f64>() >= config.settings_bob.splitter_ratio);
                let j = jitter.map_or(0.0, |n| n.sample(&mut rng_bob));
                det_b = (basis as u8) << 1;
                time_b = t + config.path_delay_bob + j;
            }
            match (alive_a, alive_b) {
                (true, true) => {
                    let angle_a = config.settings_alice.angle((det_a >> 1) as usize);
                    let angle_b = config.settings_bob.angle((det_b >> 1) as usize);
                    let v = config.visibility.effective(angle_a, angle_b);
                    let (oa, ob) = draw_joint(&mut rng_pairs, angle_a, angle_b, v);
                    det_a |= oa.index() as u8;
                    det_b |= ob.index() as u8;
                }
                (true, false) => {
                    det_a |= u8::from(rng_pairs.gen::<f64>() < 0.5);
                }
                (false, true) => {
                    det_b |= u8::from(rng_pairs.gen::<f64>() < 0.5);
                }
                (false, false) => unreachable!(),
            }
            // Clicks arriving before the first sync pulse have no reference
            // and are dropped.
            let keep_a = alive_a && time_a >= config.path_delay_alice;
            let keep_b = alive_b && time_b >= config.path_delay_bob;
            let mut tag_a = u32::MAX;
            let mut tag_b = u32::MAX;
            if keep_a {
                tag_a = next_tag_a;
                next_tag_a += 1;
                alice.push(Draft { time: time_a, detector: det_a, tag: tag_a });
            }
            if keep_b {
                tag_b = next_tag_b;
                next_tag_b += 1;
                bob.push(Draft { time: time_b, detector: det_b, tag: tag_b });
            }
            if keep_a && keep_b {
                pair_links.push((tag_a, tag_b));
            }
        }
    }

    // Background: uniform uncorrelated clicks on the receiver's local
    // clock over the same span the signal can occupy.
    let gen_background =
        |rate: f64, delay: f64, rng: &mut Rng, out: &mut Vec<Draft>, next_tag: &mut u32| {
            if rate <= 0.0 {
                return;
            }
            let exp = Exp::new(rate).expect("positive rate");
            let mut t = delay;
            loop {
                t += exp.sample(rng);
                if t >= delay + config.duration {
                    break;
                }
                let detector = rng.gen_range(0..4u8);
                out.push(Draft { time: t, detector, tag: *next_tag });
                *next_tag += 1;
            }
        };
    gen_background(
        config.background_rate_alice,
        config.path_delay_alice,
        &mut rng_bg_a,
        &mut alice,
        &mut next_tag_a,
    );
    gen_background(
        config.background_rate_bob,
        config.path_delay_bob,
        &mut rng_bg_b,
        &mut bob,
        &mut next_tag_b,
    );

    let alice = thin_drafts(alice, &config.coupler_efficiencies_alice, &mut rng_cpl_a);
    let bob = thin_drafts(bob, &config.coupler_efficiencies_bob, &mut rng_cpl_b);

    let period = config.sync_period();
    let finish = |mut drafts: Vec<Draft>, receiver: Receiver, delay: f64| {
        drafts.sort_unstable_by(|a, b| {
            a.time.partial_cmp(&b.time).expect("finite times").then(a.tag.cmp(&b.tag))
        });
        let mut index_of_tag = std::collections::HashMap::with_capacity(drafts.len());
        let events: Vec<TimeTaggedEvent> = drafts
            .iter()
            .enumerate()
            .map(|(i, d)| {
                index_of_tag.insert(d.tag, i);
                let local = d.time - delay;
                let pulse_index = (local / period).floor() as u64;
                let offset = local - pulse_index as f64 * period;
                TimeTaggedEvent {
                    receiver,
                    detector: d.detector,
                    time: d.time,
                    pulse_index,
                    offset,
                }
            })
            .collect();
        (events, index_of_tag)
    };
    let (alice, idx_a) = finish(alice, Receiver::Alice, config.path_delay_alice);
    let (bob, idx_b) = finish(bob, Receiver::Bob, config.path_delay_bob);

    let mut truth: Vec<(usize, usize)> = pair_links
        .iter()
        .filter_map(|(ta, tb)| match (idx_a.get(ta), idx_b.get(tb)) {
            (Some(&ia), Some(&ib)) => Some((ia, ib)),
            _ => None,
        })
        .collect();
    truth.sort_unstable();

    Ok(RunOutput { alice, bob, truth })
}

/// Per-detector click totals for one stream.
pub fn singles_counts(events: &[TimeTaggedEvent]) -> [u64; 4] {
    let mut counts = [0u64; 4];
    for ev in events {
        counts[ev.detector as usize] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Event stream export
// ---------------------------------------------------------------------------

pub const EVENT_CSV_HEADER: &str = "receiver,detector,time_ns,pulse_index,offset_ns";

/// Write events as CSV (`receiver,detector,time_ns,pulse_index,offset_ns`).
pub fn write_events_csv<W: Write>(w: &mut W, events: &[TimeTaggedEvent]) -> Result<()> {
    writeln!(w, "{EVENT_CSV_HEADER}")?;
    for ev in events {
        writeln!(
            w,
            "{},{},{:.3},{},{:.3}",
            ev.receiver.as_str(),
            ev.detector,
            ev.time * 1e9,
            ev.pulse_index,
            ev.offset * 1e9
        )?;
    }
    Ok(())
}

const EVENT_MAGIC: &[u8; 4] = b"ELK1";

/// Write events in the compact binary layout: a 4-byte magic `ELK1`, a
/// little-endian u64 record count, then 26 bytes per record:
/// receiver (u8, 0 = Alice), detector (u8), time (f64 LE seconds),
/// pulse_index (u64 LE), offset (f64 LE seconds).
pub fn write_events_binary<W: Write>(w: &mut W, events: &[TimeTaggedEvent]) -> Result<()> {
    w.write_all(EVENT_MAGIC)?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for ev in events {
        w.write_all(&[matches!(ev.receiver, Receiver::Bob) as u8, ev.detector])?;
        w.write_all(&ev.time.to_le_bytes())?;
        w.write_all(&ev.pulse_index.to_le_bytes())?;
        w.write_all(&ev.offset.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_events_binary<R: Read>(r: &mut R) -> Result<Vec<TimeTaggedEvent>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EVENT_MAGIC {
        return Err(Error::InvalidConfig("bad event file magic".into()));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        r.read_exact(&mut buf8)?;
        let time = f64::from_le_bytes(buf8);
        r.read_exact(&mut buf8)?;
        let pulse_index = u64::from_le_bytes(buf8);
        r.read_exact(&mut buf8)?;
        let offset = f64::from_le_bytes(buf8);
        events.push(TimeTaggedEvent {
            receiver: if head[0] == 0 { Receiver::Alice } else { Receiver::Bob },
            detector: head[1],
            time,
            pulse_index,
            offset,
        });
    }
    Ok(events)
}

pub fn read_events_csv<R: BufRead>(r: &mut R) -> Result<Vec<TimeTaggedEvent>> {
    let mut events = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 5 {
            return Err(Error::InvalidConfig(format!("bad CSV row {lineno}")));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("row {lineno}: {e}")))
        };
        events.push(TimeTaggedEvent {
            receiver: if parts[0] == "alice" { Receiver::Alice } else { Receiver::Bob },
            detector: parts[1]
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("row {lineno}: {e}")))?,
            time: parse(parts[2])? / 1e9,
            pulse_index: parts[3]
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("row {lineno}: {e}")))?,
            offset: parse(parts[4])? / 1e9,
        });
    }
    Ok(events)
}
