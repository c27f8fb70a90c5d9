//! FLOP and payload accounting and the synchronous round-latency model.
//!
//! Only dense products are counted: a forward product of `rows × d_in` by
//! `d_in × d_out` costs `2·rows·d_in·d_out`, and a backward pass costs twice
//! its forward pass. Attention score products, softmax and nonlinearities
//! are not counted.
//!
//! A round is a sequence of barriers. Client phases run in parallel, so each
//! contributes the maximum over clients:
//!
//! ```text
//! max_i(fwd_i + up_i) + server + max_i(down_i) + max_i(bwd_i)
//!   [+ max_i(upload_i) + aggregator + max_i(broadcast_i)]
//! ```
//!
//! with compute terms `flops / flops_per_sec` and transfer terms
//! `bytes·8 / bits_per_sec`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::count_trainable;
use crate::protocol::{Message, Payload};

fn default_client_flops() -> f64 {
    35.6e12
}
fn default_server_flops() -> f64 {
    284.8e12
}
fn default_client_aggregator_bps() -> f64 {
    300e6
}
fn default_client_server_bps() -> f64 {
    600e6
}
fn default_bytes_per_element() -> u64 {
    4
}
fn default_header_bytes() -> u64 {
    64
}

/// Compute rates in FLOP/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSpec {
    #[serde(default = "default_client_flops")]
    pub client_flops_per_sec: f64,
    #[serde(default = "default_server_flops")]
    pub server_flops_per_sec: f64,
    /// Defaults to the client rate.
    #[serde(default = "default_client_flops")]
    pub aggregator_flops_per_sec: f64,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        Self {
            client_flops_per_sec: default_client_flops(),
            server_flops_per_sec: default_server_flops(),
            aggregator_flops_per_sec: default_client_flops(),
        }
    }
}

/// Link rates in bit/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default = "default_client_aggregator_bps")]
    pub client_aggregator_bps: f64,
    #[serde(default = "default_client_server_bps")]
    pub client_server_bps: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self { client_aggregator_bps: default_client_aggregator_bps(), client_server_bps: default_client_server_bps() }
    }
}

/// How payloads are sized on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireFormat {
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u64,
    #[serde(default = "default_header_bytes")]
    pub header_bytes: u64,
}

impl Default for WireFormat {
    fn default() -> Self {
        Self { bytes_per_element: default_bytes_per_element(), header_bytes: default_header_bytes() }
    }
}

/// Checks that every rate is positive and finite.
pub fn validate_specs(compute: &ComputeSpec, links: &LinkSpec) -> Result<()> {
    let rates = [
        ("client_flops_per_sec", compute.client_flops_per_sec),
        ("server_flops_per_sec", compute.server_flops_per_sec),
        ("aggregator_flops_per_sec", compute.aggregator_flops_per_sec),
        ("client_aggregator_bps", links.client_aggregator_bps),
        ("client_server_bps", links.client_server_bps),
    ];
    for (name, v) in rates {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// One dense product `rows × d_in` by `d_in × d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseProduct {
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

pub fn flops_of_pass(products: &[DenseProduct], rows: usize, direction: Direction) -> u64 {
    let forward: u64 = products.iter().map(|p| 2 * (rows * p.d_in * p.d_out) as u64).sum();
    match direction {
        Direction::Forward => forward,
        Direction::Backward => 2 * forward,
    }
}

/// Wire size: elements at `bytes_per_element`, labels at 4 bytes, plus the
/// header.
pub fn payload_bytes(message: &Message, wire: &WireFormat) -> u64 {
    let (elements, labels) = match &message.payload {
        Payload::Activations { s, y, .. } => (s.len(), y.len()),
        Payload::ActivationGrads { ds, .. } => (ds.len(), 0),
        Payload::AdapterUpload { set, .. } | Payload::AdapterBroadcast { set, .. } => (count_trainable(set), 0),
    };
    elements as u64 * wire.bytes_per_element + labels as u64 * 4 + wire.header_bytes
}

/// Per-client costs of the split phases of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClientPhases {
    /// Client forward FLOPs.
    pub forward_flops: Option<u64>,
    /// Bytes sent to the server.
    pub uplink_bytes: Option<u64>,
    /// Bytes received from the server.
    pub downlink_bytes: Option<u64>,
    /// Client backward FLOPs.
    pub backward_flops: Option<u64>,
}

impl ClientPhases {
    pub fn complete(forward_flops: u64, uplink_bytes: u64, downlink_bytes: u64, backward_flops: u64) -> Self {
        Self {
            forward_flops: Some(forward_flops),
            uplink_bytes: Some(uplink_bytes),
            downlink_bytes: Some(downlink_bytes),
            backward_flops: Some(backward_flops),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregationTrace {
    pub upload_bytes: Vec<u64>,
    pub aggregator_flops: u64,
    pub broadcast_bytes: Vec<u64>,
}

/// Costs of one round, by phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundTrace {
    pub clients: Vec<ClientPhases>,
    pub server_flops: Option<u64>,
    pub aggregation: Option<AggregationTrace>,
}

fn require(v: Option<u64>, what: &str, client: usize) -> Result<u64> {
    v.ok_or_else(|| Error::Accounting(format!("trace is missing {what} for client {client}")))
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

/// Simulated wall-clock seconds of one round under the barrier model.
pub fn round_latency(trace: &RoundTrace, compute: &ComputeSpec, links: &LinkSpec) -> Result<f64> {
    if trace.clients.is_empty() {
        return Err(Error::Accounting("trace has no clients".into()));
    }
    let server_flops = trace.server_flops.ok_or_else(|| Error::Accounting("trace is missing the server phase".into()))?;
    let bits = |bytes: u64, bps: f64| bytes as f64 * 8.0 / bps;
    let mut up = Vec::new();
    let mut down = Vec::new();
    let mut back = Vec::new();
    for (i, c) in trace.clients.iter().enumerate() {
        let fwd = require(c.forward_flops, "the forward phase", i)? as f64 / compute.client_flops_per_sec;
        up.push(fwd + bits(require(c.uplink_bytes, "the uplink phase", i)?, links.client_server_bps));
        down.push(bits(require(c.downlink_bytes, "the downlink phase", i)?, links.client_server_bps));
        back.push(require(c.backward_flops, "the backward phase", i)? as f64 / compute.client_flops_per_sec);
    }
    let mut latency =
        max_of(up.into_iter()) + server_flops as f64 / compute.server_flops_per_sec + max_of(down.into_iter()) + max_of(back.into_iter());
    if let Some(agg) = &trace.aggregation {
        if agg.upload_bytes.len() != trace.clients.len() || agg.broadcast_bytes.len() != trace.clients.len() {
            return Err(Error::Accounting("aggregation trace does not cover every client".into()));
        }
        latency += max_of(agg.upload_bytes.iter().map(|b| bits(*b, links.client_aggregator_bps)))
            + agg.aggregator_flops as f64 / compute.aggregator_flops_per_sec
            + max_of(agg.broadcast_bytes.iter().map(|b| bits(*b, links.client_aggregator_bps)));
    }
    Ok(latency)
}

/// Cumulative FLOPs per entity, bytes per link and simulated time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub flops: BTreeMap<String, u64>,
    pub bytes: BTreeMap<String, u64>,
    pub sim_time_s: f64,
}

impl CostLedger {
    pub fn add_flops(&mut self, entity: &str, flops: u64) {
        *self.flops.entry(entity.to_string()).or_default() += flops;
    }

    pub fn add_bytes(&mut self, link: &str, bytes: u64) {
        *self.bytes.entry(link.to_string()).or_default() += bytes;
    }

    /// Advances simulated time by the latency of `trace` and returns it.
    pub fn advance(&mut self, trace: &RoundTrace, compute: &ComputeSpec, links: &LinkSpec) -> Result<f64> {
        let dt = round_latency(trace, compute, links)?;
        self.sim_time_s += dt;
        Ok(dt)
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.values().sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }
}
