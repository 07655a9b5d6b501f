//! Ordered reliable duplex transports for the protocol: an in-process
//! queue pair for threaded parties, a TCP stream with framed JSON for
//! separate processes, and a lock-step adapter that runs the responder
//! inline for single-threaded deterministic execution.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::mpsc;

use super::alice::AliceParty;
use super::message::{read_frame, write_frame, ProtocolMessage};
use crate::error::{Error, Result};

pub trait Channel {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()>;
    fn recv(&mut self) -> Result<ProtocolMessage>;
}

/// One end of an in-process duplex link.
pub struct MpscChannel {
    tx: mpsc::Sender<ProtocolMessage>,
    rx: mpsc::Receiver<ProtocolMessage>,
}

/// Two connected in-process endpoints.
pub fn mpsc_pair() -> (MpscChannel, MpscChannel) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (MpscChannel { tx: tx_ab, rx: rx_ba }, MpscChannel { tx: tx_ba, rx: rx_ab })
}

impl Channel for MpscChannel {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()> {
        self.tx.send(msg).map_err(|_| Error::ChannelClosed)
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        self.rx.recv().map_err(|_| Error::ChannelClosed)
    }
}

/// Framed JSON over a TCP stream.
pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let writer = BufWriter::new(stream);
        Ok(TcpChannel { reader, writer })
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()> {
        write_frame(&mut self.writer, &msg)
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        read_frame(&mut self.reader)
    }
}

/// Bob-side channel that runs Alice's handler synchronously on every
/// send. Gives a fully deterministic single-threaded session with the
/// same message flow as the threaded and socketed placements.
pub struct LockstepChannel<'a> {
    pub alice: &'a mut AliceParty,
    inbox: VecDeque<ProtocolMessage>,
}

impl<'a> LockstepChannel<'a> {
    pub fn new(alice: &'a mut AliceParty) -> Self {
        LockstepChannel { alice, inbox: VecDeque::new() }
    }
}

impl Channel for LockstepChannel<'_> {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()> {
        let replies = self.alice.handle(&msg)?;
        self.inbox.extend(replies);
        Ok(())
    }

    fn recv(&mut self) -> Result<ProtocolMessage> {
        self.inbox.pop_front().ok_or(Error::ChannelClosed)
    }
}
