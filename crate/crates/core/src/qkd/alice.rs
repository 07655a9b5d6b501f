//! The reference party. Alice reacts to Bob's messages: she reveals her
//! bases, announces the QBER sample, answers parity queries without ever
//! learning Bob's bits, and confirms the final key hash. Her key is never
//! modified by reconciliation.

use std::collections::HashMap;

use rand::Rng as _;

use super::bits::Bits;
use super::cascade::{block_parities, permutation, range_parity};
use super::hashing::{final_length, key_hash, toeplitz_compress};
use super::message::{IoState, Payload, ProtocolMessage};
use super::{bits_at, sift_indices, KeyBlock, KeyStage, LocalView, ProtocolConfig};
use crate::error::{Error, Result, Stage};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    AwaitBasis,
    AwaitSampleBits,
    Serving,
    AwaitConfirm,
    Done,
    Aborted,
}

pub struct AliceParty {
    cfg: ProtocolConfig,
    view: LocalView,
    pub key: KeyBlock,
    pub io: IoState,
    rng: Rng,
    state: State,
    sample_indices: Vec<u32>,
    my_sample: Bits,
    parity_bits_sent: u64,
    perms: HashMap<u64, Vec<u32>>,
    pub sifted_indices: Vec<usize>,
    pub final_key: Option<Bits>,
    pub confirmed: Option<bool>,
}

impl AliceParty {
    pub fn new(view: LocalView, cfg: ProtocolConfig) -> Self {
        let session = derive_seed(cfg.seed, "session", 0);
        let rng = seeded(derive_seed(cfg.seed, "party-alice", 0));
        let key = KeyBlock::raw(view.bits.clone());
        AliceParty {
            io: IoState::new(session, cfg.log_transcript),
            cfg,
            view,
            key,
            rng,
            state: State::AwaitBasis,
            sample_indices: Vec::new(),
            my_sample: Bits::new(),
            parity_bits_sent: 0,
            perms: HashMap::new(),
            sifted_indices: Vec::new(),
            final_key: None,
            confirmed: None,
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, State::Done | State::Aborted)
    }

    pub fn qber(&self) -> Option<f64> {
        self.key.qber_estimate
    }

    /// Process one incoming message and produce the replies to send, in
    /// order. Errors abort the session.
    pub fn handle(&mut self, msg: &ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        self.io.note_incoming(msg)?;
        let replies = match (&self.state, &msg.payload) {
            (State::AwaitBasis, Payload::BasisReveal { n, digest, bases_hex }) => {
                self.on_basis_reveal(*n, digest, bases_hex)
            }
            (State::AwaitSampleBits, Payload::SampleBits { n, bits_hex }) => {
                self.on_sample_bits(*n, bits_hex)
            }
            (State::Serving, Payload::ParityRequest { pass, shuffle_seed, block_size, intervals }) => {
                self.on_parity_request(*pass, *shuffle_seed, *block_size, intervals)
            }
            (State::Serving, Payload::HashSeed { seed, final_len }) => {
                self.on_hash_seed(*seed, *final_len)
            }
            (State::AwaitConfirm, Payload::Confirmation { hash }) => self.on_confirmation(hash),
            (state, payload) => Err(Error::Protocol(format!(
                "unexpected {} in state {:?}",
                payload.type_name(),
                state
            ))),
        }?;
        self.key.leaked_bits = self.io.sent_key_bits;
        Ok(replies)
    }

    fn on_basis_reveal(
        &mut self,
        n: u64,
        digest: &str,
        bases_hex: &str,
    ) -> Result<Vec<ProtocolMessage>> {
        if n != self.view.len() as u64 || digest != format!("{:016x}", self.view.digest()) {
            return Err(Error::Abort {
                stage: Stage::Sift,
                reason: "coincidence identifier mismatch".into(),
            });
        }
        let bob_bases = Bits::from_hex(bases_hex, self.view.len())?;
        let kept = sift_indices(&self.view.bases, &bob_bases);
        if kept.is_empty() {
            return Err(Error::Abort { stage: Stage::Sift, reason: "empty sifted key".into() });
        }
        self.key.bits = Bits::from_bools(kept.iter().map(|&i| self.view.bits.get(i)));
        self.key.stage = KeyStage::Sifted;
        self.sifted_indices = kept;

        let sifted_len = self.key.bits.len();
        let sample_count = (self.cfg.sample_fraction * sifted_len as f64).floor() as usize;
        if sample_count == 0 || sample_count >= sifted_len {
            return Err(Error::Abort {
                stage: Stage::QberEstimate,
                reason: format!(
                    "sample of {sample_count} from {sifted_len} bits is unusable"
                ),
            });
        }
        let mut pool: Vec<u32> = (0..sifted_len as u32).collect();
        for i in 0..sample_count {
            let j = self.rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut indices = pool[..sample_count].to_vec();
        indices.sort_unstable();
        self.my_sample = bits_at(&self.key.bits, &indices);
        self.sample_indices = indices.clone();

        let my_bases = self.view.bases_hex();
        let basis_reveal = self.io.compose(Payload::BasisReveal {
            n: self.view.len() as u64,
            digest: format!("{:016x}", self.view.digest()),
            bases_hex: my_bases,
        });
        let sample_indices = self.io.compose(Payload::SampleIndices { indices });
        let sample_bits = self.io.compose(Payload::SampleBits {
            n: self.my_sample.len() as u32,
            bits_hex: self.my_sample.to_hex(),
        });
        self.state = State::AwaitSampleBits;
        Ok(vec![basis_reveal, sample_indices, sample_bits])
    }

    fn on_sample_bits(&mut self, n: u32, bits_hex: &str) -> Result<Vec<ProtocolMessage>> {
        if n as usize != self.my_sample.len() {
            return Err(Error::Protocol(format!(
                "sample reply of {n} bits, expected {}",
                self.my_sample.len()
            )));
        }
        let bob_sample = Bits::from_hex(bits_hex, n as usize)?;
        let qber = self.my_sample.count_diff(&bob_sample) as f64 / n as f64;
        let positions: Vec<usize> =
            self.sample_indices.iter().map(|&i| i as usize).collect();
        self.key.bits = self.key.bits.remove_sorted(&positions);
        self.key.qber_estimate = Some(qber);
        if qber > self.cfg.abort_qber {
            // Bob computes the same rate from the same bits and raises
            // the abort on his side.
            self.state = State::Aborted;
            return Ok(vec![]);
        }
        self.state = State::Serving;
        Ok(vec![])
    }

    fn on_parity_request(
        &mut self,
        _pass: u32,
        shuffle_seed: u64,
        block_size: u32,
        intervals: &[(u32, u32)],
    ) -> Result<Vec<ProtocolMessage>> {
        let n = self.key.bits.len();
        let perm = self.perms.entry(shuffle_seed).or_insert_with(|| permutation(n, shuffle_seed));
        let parities: Vec<bool> = if block_size > 0 {
            block_parities(&self.key.bits, perm, block_size as usize)
        } else {
            let mut out = Vec::with_capacity(intervals.len());
            for &(s, e) in intervals {
                let (s, e) = (s as usize, e as usize);
                if s >= e || e > n {
                    return Err(Error::Protocol(format!("bad parity interval ({s}, {e})")));
                }
                out.push(range_parity(&self.key.bits, perm, s, e));
            }
            out
        };
        self.parity_bits_sent += parities.len() as u64;
        let reply = self.io.compose(Payload::ParityResponse {
            n: parities.len() as u32,
            parities_hex: Bits::from_bools(parities).to_hex(),
        });
        Ok(vec![reply])
    }

    fn on_hash_seed(&mut self, seed: u64, final_len: u64) -> Result<Vec<ProtocolMessage>> {
        let qber = self.key.qber_estimate.unwrap_or(0.0);
        let m = final_length(
            self.key.bits.len(),
            qber,
            self.parity_bits_sent,
            self.cfg.epsilon,
            self.cfg.paper_margin,
        );
        if m as u64 != final_len {
            return Err(Error::Abort {
                stage: Stage::PrivacyAmplify,
                reason: format!("announced final length {final_len}, computed {m}"),
            });
        }
        self.key.stage = KeyStage::Reconciled;
        self.final_key = Some(toeplitz_compress(&self.key.bits, seed, m));
        self.state = State::AwaitConfirm;
        Ok(vec![])
    }

    fn on_confirmation(&mut self, hash: &str) -> Result<Vec<ProtocolMessage>> {
        let bob_hash = u64::from_str_radix(hash, 16)
            .map_err(|_| Error::Protocol("malformed confirmation hash".into()))?;
        let final_key = self.final_key.as_ref().expect("set at hash seed");
        let mine = key_hash(final_key);
        self.confirmed = Some(bob_hash == mine);
        let reply = self.io.compose(Payload::Confirmation { hash: format!("{mine:016x}") });
        self.key.bits = final_key.clone();
        self.key.stage = KeyStage::Final;
        self.key.leaked_bits = self.io.sent_key_bits;
        self.state = State::Done;
        Ok(vec![reply])
    }

    /// Serve a full session over a channel (thread or socket placement).
    pub fn serve<C: super::channel::Channel>(&mut self, ch: &mut C) -> Result<()> {
        loop {
            let msg = match ch.recv() {
                Ok(m) => m,
                Err(Error::ChannelClosed) if self.is_done() => return Ok(()),
                Err(e) => return Err(e),
            };
            for reply in self.handle(&msg)? {
                ch.send(reply)?;
            }
            if self.is_done() {
                return Ok(());
            }
        }
    }
}
