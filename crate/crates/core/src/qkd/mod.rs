//! Entanglement-based BB84 key distillation as a genuine two-party
//! protocol.
//!
//! Both parties hold the same ordered list of coincidence identifiers
//! (the matching itself is public timing data) but only their own basis
//! and outcome per coincidence. The pipeline is balance -> sift -> QBER
//! sampling -> Cascade reconciliation -> Toeplitz privacy amplification
//! -> hash confirmation, with every key-derived bit on the channel
//! counted in a leakage ledger.
//!
//! The parties can run in one thread (lock-step), two threads, or two
//! processes over TCP; given the same seeds all three produce identical
//! transcripts.

pub mod bits;
pub mod cascade;
pub mod channel;
pub mod hashing;
pub mod message;

mod alice;
mod bob;

pub use alice::AliceParty;
pub use bits::Bits;
pub use bob::BobParty;
pub use cascade::{reconcile, ReconcileOutcome};
pub use hashing::{binary_entropy, final_length, key_hash, toeplitz_compress};
pub use message::{Payload, ProtocolMessage, Transcript};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coincidence::CoincidenceRecord;
use crate::error::{Error, Result};
use crate::link::Receiver;
use crate::rng::{derive_seed, fnv1a, seeded, Rng};

/// Distillation stage of a key block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStage {
    Raw,
    Sifted,
    Reconciled,
    Final,
}

/// An ordered bit string with distillation provenance and the cumulative
/// count of key-derived bits its owner has sent over the channel.
#[derive(Debug, Clone)]
pub struct KeyBlock {
    pub bits: Bits,
    pub stage: KeyStage,
    pub leaked_bits: u64,
    pub qber_estimate: Option<f64>,
}

impl KeyBlock {
    pub fn raw(bits: Bits) -> Self {
        KeyBlock { bits, stage: KeyStage::Raw, leaked_bits: 0, qber_estimate: None }
    }
}

/// A party's private view of the shared coincidence list: identifiers
/// (public), plus its own basis index and outcome bit per coincidence.
#[derive(Debug, Clone)]
pub struct LocalView {
    pub ids: Vec<u64>,
    pub bases: Vec<u8>,
    pub bits: Bits,
}

/// Identifier both parties derive from the public timing data of one
/// matched coincidence.
pub fn coincidence_id(record: &CoincidenceRecord) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[0..8].copy_from_slice(&record.alice_event.pulse_index.to_le_bytes());
    let off_a = (record.alice_event.offset * 1e12).round() as i64;
    let off_b = (record.bob_event.offset * 1e12).round() as i64;
    bytes[8..16].copy_from_slice(&off_a.to_le_bytes());
    bytes[16..24].copy_from_slice(&off_b.to_le_bytes());
    fnv1a(&bytes)
}

impl LocalView {
    pub fn from_records(records: &[CoincidenceRecord], receiver: Receiver) -> LocalView {
        let mut ids = Vec::with_capacity(records.len());
        let mut bases = Vec::with_capacity(records.len());
        let mut bits = Bits::new();
        for r in records {
            ids.push(coincidence_id(r));
            let ev = match receiver {
                Receiver::Alice => &r.alice_event,
                Receiver::Bob => &r.bob_event,
            };
            bases.push(ev.basis_index() as u8);
            bits.push(ev.outcome().bit());
        }
        LocalView { ids, bases, bits }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.ids.len() * 8);
        for id in &self.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn bases_hex(&self) -> String {
        Bits::from_bools(self.bases.iter().map(|&b| b == 1)).to_hex()
    }
}

/// Indices where this party's basis equals the other party's revealed
/// basis (bit-packed). Expected kept fraction 1/2 with balanced splitters.
pub fn sift_indices(bases: &[u8], other_bases: &Bits) -> Vec<usize> {
    assert_eq!(bases.len(), other_bases.len());
    (0..bases.len()).filter(|&i| (bases[i] == 1) == other_bases.get(i)).collect()
}

/// The bits of `key` at the given positions, in order.
pub fn bits_at(key: &Bits, indices: &[u32]) -> Bits {
    Bits::from_bools(indices.iter().map(|&i| key.get(i as usize)))
}

/// Protocol parameters shared by both parties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub seed: u64,
    /// Fraction of the sifted key disclosed for QBER estimation.
    #[serde(default = "default_sample_fraction")]
    pub sample_fraction: f64,
    /// Security parameter: 2 * log2(1/epsilon) bits are deducted at
    /// privacy amplification.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Cap the final key at half the reconciled length, the margin of
    /// the reference experiment.
    #[serde(default)]
    pub paper_margin: bool,
    #[serde(default = "default_abort_qber")]
    pub abort_qber: f64,
    #[serde(default = "default_cascade_passes")]
    pub cascade_passes: u32,
    #[serde(default = "default_true")]
    pub log_transcript: bool,
}

fn default_sample_fraction() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_abort_qber() -> f64 {
    0.11
}
fn default_cascade_passes() -> u32 {
    4
}
fn default_true() -> bool {
    true
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            seed: 0,
            sample_fraction: default_sample_fraction(),
            epsilon: default_epsilon(),
            paper_margin: false,
            abort_qber: default_abort_qber(),
            cascade_passes: default_cascade_passes(),
            log_transcript: true,
        }
    }
}

/// Randomly discard events of over-represented detectors until every
/// detector at a receiver carries the minimum (nonzero) per-detector
/// count; applied to Alice's detectors, then Bob's.
pub fn balance_records(records: &[CoincidenceRecord], rng: &mut Rng) -> Vec<CoincidenceRecord> {
    let first = balance_side(records.to_vec(), |r| r.alice_event.detector, rng);
    balance_side(first, |r| r.bob_event.detector, rng)
}

fn balance_side(
    records: Vec<CoincidenceRecord>,
    detector_of: impl Fn(&CoincidenceRecord) -> u8,
    rng: &mut Rng,
) -> Vec<CoincidenceRecord> {
    let mut by_detector: [Vec<usize>; 4] = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_detector[detector_of(r) as usize & 3].push(i);
    }
    let target = by_detector
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.len())
        .min()
        .unwrap_or(0);
    let mut keep = vec![true; records.len()];
    for class in by_detector.iter_mut() {
        if class.len() <= target {
            continue;
        }
        // Partial Fisher-Yates: the first `target` entries are the keepers.
        for i in 0..target {
            let j = rng.gen_range(i..class.len());
            class.swap(i, j);
        }
        for &idx in &class[target..] {
            keep[idx] = false;
        }
    }
    records
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| keep[i].then_some(r))
        .collect()
}

/// Compress a reconciled key block to its secure final length with a
/// seeded Toeplitz hash. `leakage` is the reconciliation parity count;
/// sampled QBER bits were already removed from the key.
pub fn privacy_amplify(
    key: &KeyBlock,
    leakage: u64,
    qber: f64,
    epsilon: f64,
    paper_margin: bool,
    seed: u64,
) -> Result<KeyBlock> {
    if key.stage != KeyStage::Reconciled {
        return Err(Error::Protocol(format!(
            "privacy amplification requires a reconciled key, got {:?}",
            key.stage
        )));
    }
    let m = final_length(key.bits.len(), qber, leakage, epsilon, paper_margin);
    Ok(KeyBlock {
        bits: toeplitz_compress(&key.bits, seed, m),
        stage: KeyStage::Final,
        leaked_bits: key.leaked_bits,
        qber_estimate: key.qber_estimate,
    })
}

/// Stage-by-stage key accounting, mirroring the five-number pipeline of
/// the reference experiment plus the exact leakage breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ledger {
    pub raw: u64,
    pub balanced: u64,
    pub sifted: u64,
    pub reconciled: u64,
    pub final_len: u64,
    pub qber: f64,
    pub corrections: u64,
    pub leakage: LeakageLedger,
    pub duration_seconds: f64,
    pub rate_bits_per_second: f64,
    pub hash_match: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageLedger {
    pub sample_bits_alice: u64,
    pub sample_bits_bob: u64,
    pub parity_bits: u64,
    pub confirmation_bits: u64,
}

impl LeakageLedger {
    pub fn total(&self) -> u64 {
        self.sample_bits_alice + self.sample_bits_bob + self.parity_bits + self.confirmation_bits
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionConfig {
    pub protocol: ProtocolConfig,
    /// Apply coupler balancing before sifting.
    #[serde(default = "default_true")]
    pub balance: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { protocol: ProtocolConfig::default(), balance: true }
    }
}

/// Everything a finished session leaves behind.
#[derive(Debug)]
pub struct SessionOutcome {
    pub ledger: Ledger,
    pub alice_key: KeyBlock,
    pub bob_key: KeyBlock,
    pub alice_transcript: Transcript,
    pub bob_transcript: Transcript,
    pub confirmed: bool,
}

fn prepare_views(
    records: &[CoincidenceRecord],
    cfg: &SessionConfig,
) -> (u64, u64, LocalView, LocalView) {
    let raw = records.len() as u64;
    let balanced: Vec<CoincidenceRecord> = if cfg.balance {
        let mut rng = seeded(derive_seed(cfg.protocol.seed, "balance", 0));
        balance_records(records, &mut rng)
    } else {
        records.to_vec()
    };
    let alice_view = LocalView::from_records(&balanced, Receiver::Alice);
    let bob_view = LocalView::from_records(&balanced, Receiver::Bob);
    (raw, balanced.len() as u64, alice_view, bob_view)
}

fn assemble(
    raw: u64,
    balanced: u64,
    duration: f64,
    alice: AliceParty,
    bob: BobParty,
) -> SessionOutcome {
    let sifted = bob.sifted_indices.len() as u64;
    let reconciled = bob.reconciled_len as u64;
    let sample_n = sifted - reconciled;
    let final_len = bob.final_key.as_ref().map_or(0, |k| k.len()) as u64;
    let confirmed = bob.confirmed == Some(true) && alice.confirmed == Some(true);
    let qber = bob.key.qber_estimate.unwrap_or(0.0);
    let ledger = Ledger {
        raw,
        balanced,
        sifted,
        reconciled,
        final_len,
        qber,
        corrections: bob.cascade.corrections,
        leakage: LeakageLedger {
            sample_bits_alice: sample_n,
            sample_bits_bob: sample_n,
            parity_bits: bob.cascade.parity_bits,
            confirmation_bits: 128,
        },
        duration_seconds: duration,
        rate_bits_per_second: if duration > 0.0 { final_len as f64 / duration } else { 0.0 },
        hash_match: confirmed,
    };
    SessionOutcome {
        ledger,
        alice_key: alice.key,
        bob_key: bob.key,
        alice_transcript: alice.io.transcript,
        bob_transcript: bob.io.transcript,
        confirmed,
    }
}

/// Run the full pipeline with both parties in the calling thread,
/// deterministically interleaved.
pub fn run_session_lockstep(
    records: &[CoincidenceRecord],
    duration: f64,
    cfg: &SessionConfig,
) -> Result<SessionOutcome> {
    let (raw, balanced, alice_view, bob_view) = prepare_views(records, cfg);
    let mut alice = AliceParty::new(alice_view, cfg.protocol.clone());
    let mut bob = BobParty::new(bob_view, cfg.protocol.clone());
    {
        let mut ch = channel::LockstepChannel::new(&mut alice);
        bob.run(&mut ch)?;
    }
    Ok(assemble(raw, balanced, duration, alice, bob))
}

/// Run the full pipeline with the parties on two threads connected by
/// in-process queues.
pub fn run_session_threads(
    records: &[CoincidenceRecord],
    duration: f64,
    cfg: &SessionConfig,
) -> Result<SessionOutcome> {
    let (raw, balanced, alice_view, bob_view) = prepare_views(records, cfg);
    let mut alice = AliceParty::new(alice_view, cfg.protocol.clone());
    let mut bob = BobParty::new(bob_view, cfg.protocol.clone());
    let (mut ch_alice, mut ch_bob) = channel::mpsc_pair();
    let handle = std::thread::spawn(move || {
        let res = alice.serve(&mut ch_alice);
        (alice, res)
    });
    let bob_res = bob.run(&mut ch_bob);
    drop(ch_bob);
    let (alice, alice_res) = handle.join().map_err(|_| Error::ChannelClosed)?;
    bob_res?;
    alice_res?;
    Ok(assemble(raw, balanced, duration, alice, bob))
}
