//! The correcting party. Bob drives the session: he initiates the basis
//! exchange, runs the Cascade queries, announces the privacy-amplification
//! seed, and opens the confirmation round. His key is the one that gets
//! corrected; Alice's bits never change.

use rand::Rng as _;

use super::bits::Bits;
use super::cascade::{cascade_correct, CascadeOutcome, ParityOracle};
use super::channel::Channel;
use super::hashing::{final_length, key_hash, toeplitz_compress};
use super::message::{IoState, Payload, ProtocolMessage};
use super::{bits_at, sift_indices, KeyBlock, KeyStage, LocalView, ProtocolConfig};
use crate::error::{Error, Result, Stage};
use crate::rng::{derive_seed, seeded, Rng};

pub struct BobParty {
    cfg: ProtocolConfig,
    view: LocalView,
    pub key: KeyBlock,
    pub io: IoState,
    rng: Rng,
    pub sifted_indices: Vec<usize>,
    pub reconciled_len: usize,
    pub cascade: CascadeOutcome,
    pub final_key: Option<Bits>,
    pub confirmed: Option<bool>,
}

impl BobParty {
    pub fn new(view: LocalView, cfg: ProtocolConfig) -> Self {
        let session = derive_seed(cfg.seed, "session", 0);
        let rng = seeded(derive_seed(cfg.seed, "party-bob", 0));
        let key = KeyBlock::raw(view.bits.clone());
        BobParty {
            io: IoState::new(session, cfg.log_transcript),
            cfg,
            view,
            key,
            rng,
            sifted_indices: Vec::new(),
            reconciled_len: 0,
            cascade: CascadeOutcome::default(),
            final_key: None,
            confirmed: None,
        }
    }

    fn send<C: Channel>(&mut self, ch: &mut C, payload: Payload) -> Result<()> {
        let msg = self.io.compose(payload);
        self.key.leaked_bits = self.io.sent_key_bits;
        ch.send(msg)
    }

    fn recv<C: Channel>(&mut self, ch: &mut C) -> Result<ProtocolMessage> {
        let msg = ch.recv()?;
        self.io.note_incoming(&msg)?;
        Ok(msg)
    }

    /// Drive the whole pipeline: sift, QBER sampling, reconciliation,
    /// privacy amplification, confirmation. On success `final_key` holds
    /// the confirmed key.
    pub fn run<C: Channel>(&mut self, ch: &mut C) -> Result<()> {
        // Basis exchange. Both sides derive the kept set independently.
        self.send(
            ch,
            Payload::BasisReveal {
                n: self.view.len() as u64,
                digest: format!("{:016x}", self.view.digest()),
                bases_hex: self.view.bases_hex(),
            },
        )?;
        let msg = self.recv(ch)?;
        let kept = match &msg.payload {
            Payload::BasisReveal { n, digest, bases_hex } => {
                if *n != self.view.len() as u64
                    || *digest != format!("{:016x}", self.view.digest())
                {
                    return Err(Error::Abort {
                        stage: Stage::Sift,
                        reason: "coincidence identifier mismatch".into(),
                    });
                }
                let alice_bases = Bits::from_hex(bases_hex, self.view.len())?;
                sift_indices(&self.view.bases, &alice_bases)
            }
            p => return Err(Error::Protocol(format!("expected BasisReveal, got {}", p.type_name()))),
        };
        if kept.is_empty() {
            return Err(Error::Abort { stage: Stage::Sift, reason: "empty sifted key".into() });
        }
        // The singlet anti-correlates equal-basis outcomes; Bob inverts
        // so that error-free keys agree.
        self.key.bits = Bits::from_bools(kept.iter().map(|&i| self.view.bits.get(i)));
        self.key.bits.flip_all();
        self.key.stage = KeyStage::Sifted;
        self.sifted_indices = kept;

        // QBER estimation over Alice's announced sample.
        let msg = self.recv(ch)?;
        let indices = match msg.payload {
            Payload::SampleIndices { indices } => indices,
            ref p => {
                return Err(Error::Protocol(format!(
                    "expected SampleIndices, got {}",
                    p.type_name()
                )))
            }
        };
        let n_key = self.key.bits.len();
        if indices.is_empty()
            || indices.windows(2).any(|w| w[0] >= w[1])
            || indices.last().map(|&i| i as usize >= n_key) == Some(true)
        {
            return Err(Error::Protocol("bad sample index set".into()));
        }
        let msg = self.recv(ch)?;
        let alice_sample = match &msg.payload {
            Payload::SampleBits { n, bits_hex } if *n as usize == indices.len() => {
                Bits::from_hex(bits_hex, *n as usize)?
            }
            p => return Err(Error::Protocol(format!("expected SampleBits, got {}", p.type_name()))),
        };
        let my_sample = bits_at(&self.key.bits, &indices);
        self.send(
            ch,
            Payload::SampleBits { n: my_sample.len() as u32, bits_hex: my_sample.to_hex() },
        )?;
        let qber = alice_sample.count_diff(&my_sample) as f64 / indices.len() as f64;
        let positions: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        self.key.bits = self.key.bits.remove_sorted(&positions);
        self.reconciled_len = self.key.bits.len();
        self.key.qber_estimate = Some(qber);
        if qber > self.cfg.abort_qber {
            return Err(Error::Abort {
                stage: Stage::QberEstimate,
                reason: format!("QBER {qber:.4} above threshold {}", self.cfg.abort_qber),
            });
        }

        // Cascade reconciliation; every parity Alice discloses is counted.
        let mut bits = self.key.bits.clone();
        let outcome = {
            let key_len = bits.len();
            let mut oracle = ChannelOracle { ch, io: &mut self.io, key_len };
            cascade_correct(&mut bits, qber, self.cfg.cascade_passes, &mut self.rng, &mut oracle)?
        };
        self.key.bits = bits;
        self.key.stage = KeyStage::Reconciled;
        self.cascade = outcome;

        // Privacy amplification with an announced Toeplitz seed.
        let pa_seed: u64 = self.rng.gen();
        let m = final_length(
            self.key.bits.len(),
            qber,
            outcome.parity_bits,
            self.cfg.epsilon,
            self.cfg.paper_margin,
        );
        self.send(ch, Payload::HashSeed { seed: pa_seed, final_len: m as u64 })?;
        let final_key = toeplitz_compress(&self.key.bits, pa_seed, m);

        // Confirmation round.
        let mine = key_hash(&final_key);
        self.send(ch, Payload::Confirmation { hash: format!("{mine:016x}") })?;
        let msg = self.recv(ch)?;
        let alice_hash = match &msg.payload {
            Payload::Confirmation { hash } => u64::from_str_radix(hash, 16)
                .map_err(|_| Error::Protocol("malformed confirmation hash".into()))?,
            p => {
                return Err(Error::Protocol(format!(
                    "expected Confirmation, got {}",
                    p.type_name()
                )))
            }
        };
        self.key.bits = final_key.clone();
        self.key.stage = KeyStage::Final;
        self.key.leaked_bits = self.io.sent_key_bits;
        self.final_key = Some(final_key);
        let ok = alice_hash == mine;
        self.confirmed = Some(ok);
        if !ok {
            return Err(Error::Abort {
                stage: Stage::Confirm,
                reason: "final key hash mismatch".into(),
            });
        }
        Ok(())
    }
}

/// Parity oracle that queries Alice over the channel.
struct ChannelOracle<'a, C: Channel> {
    ch: &'a mut C,
    io: &'a mut IoState,
    key_len: usize,
}

impl<C: Channel> ChannelOracle<'_, C> {
    fn query(&mut self, payload: Payload, expect: usize) -> Result<Vec<bool>> {
        let msg = self.io.compose(payload);
        self.ch.send(msg)?;
        let reply = self.ch.recv()?;
        self.io.note_incoming(&reply)?;
        match &reply.payload {
            Payload::ParityResponse { n, parities_hex } if *n as usize == expect => {
                let bits = Bits::from_hex(parities_hex, expect)?;
                Ok((0..expect).map(|i| bits.get(i)).collect())
            }
            Payload::ParityResponse { n, .. } => Err(Error::Protocol(format!(
                "expected {expect} parities, got {n}"
            ))),
            p => Err(Error::Protocol(format!(
                "expected ParityResponse, got {}",
                p.type_name()
            ))),
        }
    }
}

impl<C: Channel> ParityOracle for ChannelOracle<'_, C> {
    fn top_parities(
        &mut self,
        pass: u32,
        shuffle_seed: u64,
        block_size: usize,
    ) -> Result<Vec<bool>> {
        let expect = self.key_len.div_ceil(block_size.max(1));
        self.query(
            Payload::ParityRequest {
                pass,
                shuffle_seed,
                block_size: block_size as u32,
                intervals: vec![],
            },
            expect,
        )
    }

    fn interval_parity(
        &mut self,
        pass: u32,
        shuffle_seed: u64,
        interval: (usize, usize),
    ) -> Result<bool> {
        let parities = self.query(
            Payload::ParityRequest {
                pass,
                shuffle_seed,
                block_size: 0,
                intervals: vec![(interval.0 as u32, interval.1 as u32)],
            },
            1,
        )?;
        Ok(parities[0])
    }
}
