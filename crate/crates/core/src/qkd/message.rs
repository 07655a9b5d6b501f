//! Protocol messages, the length-prefixed JSON wire format, and
//! transcript logging with leakage accounting.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// One classical-channel message. On the wire this is a little-endian
/// u32 length prefix followed by one JSON object with the fixed field
/// names `session`, `seq`, `type`, `body`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub session: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body")]
pub enum Payload {
    /// Measurement bases for every shared coincidence, bit-packed hex,
    /// plus the count and an FNV digest of the coincidence identifiers.
    BasisReveal { n: u64, digest: String, bases_hex: String },
    /// Positions (into the sifted key) sampled for QBER estimation.
    SampleIndices { indices: Vec<u32> },
    /// The sender's key bits at the sampled positions.
    SampleBits { n: u32, bits_hex: String },
    /// Cascade parity query. `block_size > 0` asks for the parities of
    /// all consecutive blocks of the key permuted by `shuffle_seed`
    /// (seed 0 = identity); otherwise `intervals` lists half-open
    /// `(start, end)` ranges in permuted positions.
    ParityRequest { pass: u32, shuffle_seed: u64, block_size: u32, intervals: Vec<(u32, u32)> },
    /// Parities answering the previous request, bit-packed hex.
    ParityResponse { n: u32, parities_hex: String },
    /// Privacy-amplification announcement: Toeplitz seed and final length.
    HashSeed { seed: u64, final_len: u64 },
    /// 64-bit key hash (hex) for final confirmation.
    Confirmation { hash: String },
}

impl Payload {
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::BasisReveal { .. } => "BasisReveal",
            Payload::SampleIndices { .. } => "SampleIndices",
            Payload::SampleBits { .. } => "SampleBits",
            Payload::ParityRequest { .. } => "ParityRequest",
            Payload::ParityResponse { .. } => "ParityResponse",
            Payload::HashSeed { .. } => "HashSeed",
            Payload::Confirmation { .. } => "Confirmation",
        }
    }

    /// Number of key-derived bits this payload discloses on the channel.
    /// Bases, positions, seeds, and block structure reveal nothing about
    /// the key values themselves.
    pub fn key_bits_disclosed(&self) -> u64 {
        match self {
            Payload::SampleBits { n, .. } => *n as u64,
            Payload::ParityResponse { n, .. } => *n as u64,
            Payload::Confirmation { .. } => 64,
            _ => 0,
        }
    }
}

const MAX_FRAME: u32 = 16 * 1024 * 1024;

pub fn write_frame<W: Write>(w: &mut W, msg: &ProtocolMessage) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<ProtocolMessage> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub dir: Direction,
    #[serde(flatten)]
    pub msg: ProtocolMessage,
}

/// A party's ordered view of the conversation: everything it sent or
/// received, in processing order.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub enabled: bool,
}

impl Transcript {
    pub fn new(enabled: bool) -> Self {
        Transcript { entries: Vec::new(), enabled }
    }

    pub fn record(&mut self, dir: Direction, msg: &ProtocolMessage) {
        if self.enabled {
            self.entries.push(TranscriptEntry { dir, msg: msg.clone() });
        }
    }

    /// Key-derived bits this party put on the channel, from the log.
    pub fn sent_key_bits(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.dir == Direction::Send)
            .map(|e| e.msg.payload.key_bits_disclosed())
            .sum()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Per-party message bookkeeping: sequence numbers, session binding,
/// transcript, and the exact count of key-derived bits sent.
#[derive(Debug)]
pub struct IoState {
    pub session: u64,
    seq_out: u64,
    seq_in: u64,
    pub transcript: Transcript,
    pub sent_key_bits: u64,
}

impl IoState {
    pub fn new(session: u64, log_transcript: bool) -> Self {
        IoState {
            session,
            seq_out: 0,
            seq_in: 0,
            transcript: Transcript::new(log_transcript),
            sent_key_bits: 0,
        }
    }

    /// Stamp an outgoing payload with the next sequence number, log it,
    /// and account its key leakage.
    pub fn compose(&mut self, payload: Payload) -> ProtocolMessage {
        let msg = ProtocolMessage { session: self.session, seq: self.seq_out, payload };
        self.seq_out += 1;
        self.sent_key_bits += msg.payload.key_bits_disclosed();
        self.transcript.record(Direction::Send, &msg);
        msg
    }

    /// Validate session id and strictly increasing per-direction sequence
    /// numbers on an incoming message, then log it.
    pub fn note_incoming(&mut self, msg: &ProtocolMessage) -> Result<()> {
        if msg.session != self.session {
            return Err(Error::Protocol(format!(
                "session id {} does not match {}",
                msg.session, self.session
            )));
        }
        if msg.seq != self.seq_in {
            return Err(Error::Protocol(format!(
                "out-of-order message: seq {} expected {}",
                msg.seq, self.seq_in
            )));
        }
        self.seq_in += 1;
        self.transcript.record(Direction::Recv, msg);
        Ok(())
    }
}
