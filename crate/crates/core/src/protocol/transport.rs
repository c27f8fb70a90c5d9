use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::costs::{payload_bytes, CostLedger, WireFormat};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::numerics::Matrix;

/// Simulated point-to-point link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkId {
    ClientServer(usize),
    ClientAggregator(usize),
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkId::ClientServer(i) => write!(f, "client{i}-server"),
            LinkId::ClientAggregator(i) => write!(f, "client{i}-aggregator"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Cut-layer activations and their labels, client → server.
    Activations { client_id: usize, round: u64, s: Matrix, y: Vec<u32> },
    /// Gradient of the loss w.r.t. those activations, server → client.
    ActivationGrads { client_id: usize, round: u64, ds: Matrix },
    /// Client-side adapters, client → aggregator.
    AdapterUpload { client_id: usize, round: u64, set: AdapterSet },
    /// Aggregated client-side adapters, aggregator → client.
    AdapterBroadcast { round: u64, set: AdapterSet },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub link: LinkId,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Activations,
    ActivationGrads,
    AdapterUpload,
    AdapterBroadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Sender {
    Client(usize),
    Server,
    Aggregator,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Activations { .. } => MessageKind::Activations,
            Payload::ActivationGrads { .. } => MessageKind::ActivationGrads,
            Payload::AdapterUpload { .. } => MessageKind::AdapterUpload,
            Payload::AdapterBroadcast { .. } => MessageKind::AdapterBroadcast,
        }
    }

    pub fn round(&self) -> u64 {
        match self.payload {
            Payload::Activations { round, .. }
            | Payload::ActivationGrads { round, .. }
            | Payload::AdapterUpload { round, .. }
            | Payload::AdapterBroadcast { round, .. } => round,
        }
    }

    fn sender(&self) -> Sender {
        match self.payload {
            Payload::Activations { client_id, .. } | Payload::AdapterUpload { client_id, .. } => Sender::Client(client_id),
            Payload::ActivationGrads { .. } => Sender::Server,
            Payload::AdapterBroadcast { .. } => Sender::Aggregator,
        }
    }

    /// Client at the other end of the link.
    fn client(&self) -> usize {
        match self.link {
            LinkId::ClientServer(i) | LinkId::ClientAggregator(i) => i,
        }
    }
}

/// Metadata of a delivered message, kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: u64,
    pub kind: MessageKind,
    pub client: usize,
    pub link: String,
    pub bytes: u64,
}

/// In-memory message queue that meters every send into a [`CostLedger`] and
/// enforces per-sender round ordering and request/response causality.
#[derive(Debug, Default)]
pub struct Transport {
    wire: WireFormat,
    queue: VecDeque<Message>,
    last_round: BTreeMap<Sender, u64>,
    activations: BTreeSet<(usize, u64)>,
    uploads: BTreeSet<u64>,
    log: Vec<MessageRecord>,
}

impl Transport {
    pub fn new(wire: WireFormat) -> Self {
        Self { wire, ..Default::default() }
    }

    pub fn wire(&self) -> &WireFormat {
        &self.wire
    }

    /// Enqueues a message and charges its payload to the link. Returns the
    /// bytes charged.
    pub fn send(&mut self, msg: Message, ledger: &mut CostLedger) -> Result<u64> {
        let sender = msg.sender();
        let round = msg.round();
        if let Some(&last) = self.last_round.get(&sender) {
            if round < last {
                return Err(Error::Protocol(format!("{sender:?} sent round {round} after round {last}")));
            }
        }
        let link_ok = match (&msg.payload, msg.link) {
            (Payload::Activations { client_id, .. }, LinkId::ClientServer(i))
            | (Payload::ActivationGrads { client_id, .. }, LinkId::ClientServer(i))
            | (Payload::AdapterUpload { client_id, .. }, LinkId::ClientAggregator(i)) => *client_id == i,
            (Payload::AdapterBroadcast { .. }, LinkId::ClientAggregator(_)) => true,
            _ => false,
        };
        if !link_ok {
            return Err(Error::Protocol(format!("{:?} message cannot travel on {}", msg.kind(), msg.link)));
        }
        match msg.payload {
            Payload::Activations { client_id, round, .. } => {
                self.activations.insert((client_id, round));
            }
            Payload::ActivationGrads { client_id, round, .. } => {
                if !self.activations.contains(&(client_id, round)) {
                    return Err(Error::Protocol(format!(
                        "activation gradients for client {client_id} round {round} precede its activations"
                    )));
                }
            }
            Payload::AdapterUpload { round, .. } => {
                self.uploads.insert(round);
            }
            Payload::AdapterBroadcast { round, .. } => {
                if !self.uploads.contains(&round) {
                    return Err(Error::Protocol(format!("broadcast tagged round {round} without uploads for that round")));
                }
            }
        }
        self.last_round.insert(sender, round);
        let bytes = payload_bytes(&msg, &self.wire);
        ledger.add_bytes(&msg.link.to_string(), bytes);
        self.log.push(MessageRecord { round, kind: msg.kind(), client: msg.client(), link: msg.link.to_string(), bytes });
        self.queue.push_back(msg);
        Ok(bytes)
    }

    /// Removes the oldest queued message of `kind` on `link`.
    pub fn recv(&mut self, link: LinkId, kind: MessageKind) -> Result<Message> {
        let pos = self
            .queue
            .iter()
            .position(|m| m.link == link && m.kind() == kind)
            .ok_or_else(|| Error::Protocol(format!("no {kind:?} message pending on {link}")))?;
        Ok(self.queue.remove(pos).expect("position is in range"))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[MessageRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<MessageRecord> {
        self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(client: usize, round: u64) -> Message {
        Message {
            link: LinkId::ClientServer(client),
            payload: Payload::Activations { client_id: client, round, s: Matrix::zeros(2, 2), y: vec![0, 0] },
        }
    }

    fn grads(client: usize, round: u64) -> Message {
        Message {
            link: LinkId::ClientServer(client),
            payload: Payload::ActivationGrads { client_id: client, round, ds: Matrix::zeros(2, 2) },
        }
    }

    #[test]
    fn meters_and_delivers() {
        let mut t = Transport::new(WireFormat::default());
        let mut led = CostLedger::default();
        let b = t.send(act(1, 1), &mut led).unwrap();
        assert_eq!(b, (4 + 2) * 4 + 64);
        assert_eq!(led.bytes["client1-server"], b);
        let m = t.recv(LinkId::ClientServer(1), MessageKind::Activations).unwrap();
        assert_eq!(m.round(), 1);
        assert!(t.recv(LinkId::ClientServer(1), MessageKind::Activations).is_err());
    }

    #[test]
    fn gradients_need_activations_first() {
        let mut t = Transport::new(WireFormat::default());
        let mut led = CostLedger::default();
        assert!(matches!(t.send(grads(0, 1), &mut led), Err(Error::Protocol(_))));
        t.send(act(0, 1), &mut led).unwrap();
        t.send(grads(0, 1), &mut led).unwrap();
    }

    #[test]
    fn rounds_are_monotone_per_sender() {
        let mut t = Transport::new(WireFormat::default());
        let mut led = CostLedger::default();
        t.send(act(0, 3), &mut led).unwrap();
        assert!(t.send(act(0, 2), &mut led).is_err());
        t.send(act(1, 1), &mut led).unwrap();
    }

    #[test]
    fn wrong_link_rejected() {
        let mut t = Transport::new(WireFormat::default());
        let mut led = CostLedger::default();
        let mut m = act(0, 1);
        m.link = LinkId::ClientAggregator(0);
        assert!(t.send(m, &mut led).is_err());
        let mut m = act(0, 1);
        m.link = LinkId::ClientServer(1);
        assert!(t.send(m, &mut led).is_err());
    }

    #[test]
    fn broadcast_needs_uploads() {
        let mut t = Transport::new(WireFormat::default());
        let mut led = CostLedger::default();
        let bc = Message { link: LinkId::ClientAggregator(0), payload: Payload::AdapterBroadcast { round: 2, set: AdapterSet::empty() } };
        assert!(t.send(bc.clone(), &mut led).is_err());
        let up = Message {
            link: LinkId::ClientAggregator(0),
            payload: Payload::AdapterUpload { client_id: 0, round: 2, set: AdapterSet::empty() },
        };
        t.send(up, &mut led).unwrap();
        t.send(bc, &mut led).unwrap();
    }
}
