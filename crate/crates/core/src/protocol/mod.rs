//! Split training rounds, periodic client-side aggregation, and the
//! centralized and federated baselines, all over a metered in-memory
//! transport.
//!
//! One split round: every client draws a mini-batch and runs its part up to
//! the cut (a1), sends activations and labels to the server (a2), the server
//! finishes the forward pass, computes the loss over all clients, backprops
//! and updates its adapters (a3), returns to each client the activation
//! gradient of that client's own mean loss (a4), and every client backprops
//! and updates (a5). Every `aggregation_interval` rounds the clients upload their adapters (b1), the
//! aggregator averages them with weights `|D_i|/|D|` (b2) and broadcasts the
//! result (b3). Clients and messages are always processed in ascending
//! client order, so runs are bitwise reproducible.

mod config;
mod log;
mod transport;

pub use config::{stack, Architecture, BlockKind, CostConfig, DataConfig, ModelConfig, StackSpec, TrainingConfig};
pub use log::{read_records, write_records, Checkpoint, FinalAdapters, Mode, RoundRecord, TrainableCounts, TrainingLog};
pub use transport::{LinkId, Message, MessageKind, MessageRecord, Payload, Transport};

use std::sync::Arc;

use crate::costs::{flops_of_pass, AggregationTrace, ClientPhases, CostLedger, Direction, RoundTrace};
use crate::data::{aggregation_weights, gen_synthetic, partition_with_min, sample_minibatch, Dataset};
use crate::error::{Error, Result};
use crate::lora::{aggregate, count_trainable, AdapterSet, SiteId};
use crate::model::{
    build_model, client_backward, client_forward, compute_loss, server_backward, server_forward, split, BaseModel, Batch, ClientSlice,
    ForwardCache, LossReport, PartInput, SplitModel,
};
use crate::numerics::{streams, SeededRng};

pub const SERVER: &str = "server";
pub const AGGREGATOR: &str = "aggregator";
pub const CENTRALIZED: &str = "centralized";

pub fn client_name(i: usize) -> String {
    format!("client{i}")
}

/// Everything derived from a config before the first round.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: TrainingConfig,
    pub model: SplitModel,
    pub partitions: Vec<Dataset>,
    pub weights: Vec<f64>,
    pub eval: Dataset,
    /// Initial adapters for every site of the model.
    pub adapters: AdapterSet,
    /// Per-client mini-batch generators.
    pub batch_rngs: Vec<SeededRng>,
}

/// Builds model, data, partitions and initial adapters from independent
/// seed streams, so changing one does not perturb the others.
pub fn prepare(config: &TrainingConfig) -> Result<Setup> {
    config.validate()?;
    if config.epochs.is_some() {
        ::log::warn!("`epochs` is accepted but has no effect; training runs for `rounds` rounds");
    }
    let seed = config.seed;
    let m = &config.model;
    let base = build_model(&m.architecture.layers(), m.vocab, m.seq_len, m.init_sigma, &mut SeededRng::derived(seed, streams::MODEL, 0))?;
    let sites = match &m.adapter_sites {
        Some(s) => s.clone(),
        None => base.default_adapter_sites(),
    };
    let adapters =
        base.init_adapters(&sites, config.rank, config.alpha(), config.adapter_sigma, &mut SeededRng::derived(seed, streams::ADAPTERS, 0))?;
    let model = split(Arc::new(base), config.cut_layer)?;

    let d = &config.data;
    let all =
        gen_synthetic(&d.task, m.vocab, m.seq_len, d.train_samples + d.eval_samples, &mut SeededRng::derived(seed, streams::DATA, 0))?;
    let (train, eval) = all.split_at(d.train_samples);
    let partitions =
        partition_with_min(&train, config.clients, &d.partition, config.batch_size, &mut SeededRng::derived(seed, streams::PARTITION, 0))
            .map_err(|e| Error::Config(e.to_string()))?;
    let weights = aggregation_weights(&partitions);
    let batch_rngs = (0..config.clients)
        .map(|i| {
            let index = if d.shared_batch_schedule { 0 } else { i as u64 };
            SeededRng::derived(seed, streams::CLIENT_BATCHES, index)
        })
        .collect();
    Ok(Setup { config: config.clone(), model, partitions, weights, eval, adapters, batch_rngs })
}

impl Setup {
    pub fn client_adapters(&self) -> AdapterSet {
        self.adapters.filter(|s| self.model.is_client_site(s))
    }

    pub fn server_adapters(&self) -> AdapterSet {
        self.adapters.filter(|s| !self.model.is_client_site(s))
    }

    /// Per-site learning rate for runs that train the whole model in one
    /// place: sites before the cut use the client rate.
    pub fn lr_for(&self, site: SiteId) -> f64 {
        if self.model.is_client_site(site) {
            self.config.lr_client
        } else {
            self.config.lr_server
        }
    }

    fn round_context(&self) -> RoundContext<'_> {
        RoundContext {
            model: &self.model,
            weights: &self.weights,
            batch_size: self.config.batch_size,
            lr_client: self.config.lr_client,
            lr_server: self.config.lr_server,
        }
    }
}

/// Loss of the full model with `adapters` on `data`, as a single slice.
pub fn evaluate(base: &BaseModel, adapters: &AdapterSet, data: &Dataset) -> Result<LossReport> {
    let batch = data.as_batch()?;
    let (logits, _) = base.full().forward(adapters, PartInput::Tokens(&batch.x))?;
    let rows = batch.token_rows();
    Ok(compute_loss(&logits, batch.y.tokens(), &ClientSlice::by_rows(&[rows]))?.0)
}

#[derive(Debug, Clone)]
pub struct ClientNode {
    pub id: usize,
    pub data: Dataset,
    pub adapters: AdapterSet,
    rng: SeededRng,
    pending: Option<ForwardCache>,
}

impl ClientNode {
    pub fn new(id: usize, data: Dataset, adapters: AdapterSet, rng: SeededRng) -> Self {
        Self { id, data, adapters, rng, pending: None }
    }

    fn draw_batch(&mut self, b: usize) -> Result<Batch> {
        sample_minibatch(&self.data, b, &mut self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct ServerNode {
    pub adapters: AdapterSet,
}

/// Read-only inputs of a split round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub model: &'a SplitModel,
    /// Objective and aggregation weights, `|D_i|/|D|`.
    pub weights: &'a [f64],
    pub batch_size: usize,
    pub lr_client: f64,
    pub lr_server: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub loss: LossReport,
    pub trace: RoundTrace,
}

/// One split training round over all clients.
pub fn run_round(
    round: u64,
    ctx: &RoundContext<'_>,
    clients: &mut [ClientNode],
    server: &mut ServerNode,
    transport: &mut Transport,
    ledger: &mut CostLedger,
) -> Result<RoundOutcome> {
    if clients.len() != ctx.weights.len() {
        return Err(Error::Protocol(format!("{} clients but {} weights", clients.len(), ctx.weights.len())));
    }
    let client_part = ctx.model.client_part();
    let mut phases = vec![ClientPhases::default(); clients.len()];

    // a1, a2
    for (c, ph) in clients.iter_mut().zip(phases.iter_mut()) {
        let batch = c.draw_batch(ctx.batch_size).map_err(|e| e.in_phase("a1"))?;
        let (s, cache) = client_forward(ctx.model, &c.adapters, &batch.x).map_err(|e| e.in_phase("a1"))?;
        let flops = flops_of_pass(&client_part.dense_products(&c.adapters), s.rows(), Direction::Forward);
        ledger.add_flops(&client_name(c.id), flops);
        ph.forward_flops = Some(flops);
        c.pending = Some(cache);
        let msg = Message {
            link: LinkId::ClientServer(c.id),
            payload: Payload::Activations { client_id: c.id, round, s, y: batch.y.tokens().to_vec() },
        };
        ph.uplink_bytes = Some(transport.send(msg, ledger).map_err(|e| e.in_phase("a2"))?);
    }

    // a3
    let mut acts = Vec::with_capacity(clients.len());
    let mut labels = Vec::new();
    for c in clients.iter() {
        match transport.recv(LinkId::ClientServer(c.id), MessageKind::Activations)?.payload {
            Payload::Activations { s, y, .. } => {
                labels.extend_from_slice(&y);
                acts.push(s);
            }
            _ => unreachable!("filtered by kind"),
        }
    }
    let refs: Vec<_> = acts.iter().collect();
    let (logits, cache) = server_forward(ctx.model, &server.adapters, &refs).map_err(|e| e.in_phase("a3"))?;
    let slices: Vec<ClientSlice> = acts.iter().zip(ctx.weights).map(|(s, &w)| ClientSlice { rows: s.rows(), weight: w }).collect();
    let (loss, g_logits) = compute_loss(&logits, &labels, &slices).map_err(|e| e.in_phase("a3"))?;
    let rows = logits.rows();
    let products = ctx.model.server_part().dense_products(&server.adapters);
    let (grads, ds) = server_backward(ctx.model, &server.adapters, cache, &g_logits).map_err(|e| e.in_phase("a3"))?;
    server.adapters = server.adapters.sgd_step(&grads, |_| ctx.lr_server).map_err(|e| e.in_phase("a3"))?;
    let server_flops = flops_of_pass(&products, rows, Direction::Forward) + flops_of_pass(&products, rows, Direction::Backward);
    ledger.add_flops(SERVER, server_flops);

    // a4: each client receives the gradient of its own mean loss, undoing
    // the objective weight applied on the server
    for (((c, ph), ds), &w) in clients.iter().zip(phases.iter_mut()).zip(ds).zip(ctx.weights) {
        let ds = if w == 1.0 { ds } else { ds.scale(1.0 / w)? };
        let msg = Message { link: LinkId::ClientServer(c.id), payload: Payload::ActivationGrads { client_id: c.id, round, ds } };
        ph.downlink_bytes = Some(transport.send(msg, ledger).map_err(|e| e.in_phase("a4"))?);
    }

    // a5
    for (c, ph) in clients.iter_mut().zip(phases.iter_mut()) {
        let ds = match transport.recv(LinkId::ClientServer(c.id), MessageKind::ActivationGrads)?.payload {
            Payload::ActivationGrads { ds, .. } => ds,
            _ => unreachable!("filtered by kind"),
        };
        let cache = c.pending.take().ok_or_else(|| Error::State(format!("client {} has no forward pass to finish", c.id)))?;
        let rows = cache.rows();
        let grads = client_backward(ctx.model, &c.adapters, cache, &ds).map_err(|e| e.in_phase("a5"))?;
        let flops = flops_of_pass(&client_part.dense_products(&c.adapters), rows, Direction::Backward);
        c.adapters = c.adapters.sgd_step(&grads, |_| ctx.lr_client).map_err(|e| e.in_phase("a5"))?;
        ledger.add_flops(&client_name(c.id), flops);
        ph.backward_flops = Some(flops);
    }

    Ok(RoundOutcome { loss, trace: RoundTrace { clients: phases, server_flops: Some(server_flops), aggregation: None } })
}

/// Uploads every client's adapters, averages them with `weights` and
/// broadcasts the result back. Returns the aggregate and the phase costs.
pub fn run_aggregation(
    round: u64,
    clients: &mut [ClientNode],
    weights: &[f64],
    transport: &mut Transport,
    ledger: &mut CostLedger,
) -> Result<(AdapterSet, AggregationTrace)> {
    let mut trace = AggregationTrace::default();
    for c in clients.iter() {
        let msg = Message {
            link: LinkId::ClientAggregator(c.id),
            payload: Payload::AdapterUpload { client_id: c.id, round, set: c.adapters.clone() },
        };
        trace.upload_bytes.push(transport.send(msg, ledger).map_err(|e| e.in_phase("b1"))?);
    }
    let mut sets = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        match transport.recv(LinkId::ClientAggregator(c.id), MessageKind::AdapterUpload)?.payload {
            Payload::AdapterUpload { set, .. } => sets.push(set),
            _ => unreachable!("filtered by kind"),
        }
    }
    let global = aggregate(&sets, weights).map_err(|e| e.in_phase("b2"))?;
    ledger.add_flops(AGGREGATOR, 0);
    for c in clients.iter() {
        let msg = Message { link: LinkId::ClientAggregator(c.id), payload: Payload::AdapterBroadcast { round, set: global.clone() } };
        trace.broadcast_bytes.push(transport.send(msg, ledger).map_err(|e| e.in_phase("b3"))?);
    }
    for c in clients.iter_mut() {
        match transport.recv(LinkId::ClientAggregator(c.id), MessageKind::AdapterBroadcast)?.payload {
            Payload::AdapterBroadcast { set, .. } => c.adapters = set,
            _ => unreachable!("filtered by kind"),
        }
    }
    Ok((global, trace))
}

fn record(round: u64, loss: &LossReport, ledger: &CostLedger) -> RoundRecord {
    RoundRecord {
        round,
        mean_ce: loss.mean_ce,
        ppl: loss.ppl,
        per_client_ce: loss.per_client_ce.clone(),
        cum_bytes: ledger.bytes.clone(),
        cum_flops: ledger.flops.clone(),
        sim_time_s: ledger.sim_time_s,
    }
}

fn checkpoint_due(config: &TrainingConfig, round: u64) -> bool {
    config.checkpoint_every > 0 && round % config.checkpoint_every as u64 == 0
}

fn is_aggregation_round(config: &TrainingConfig, round: u64) -> bool {
    round % config.aggregation_interval as u64 == 0
}

/// Runs `config` in the given mode.
pub fn run(config: &TrainingConfig, mode: Mode) -> Result<TrainingLog> {
    match mode {
        Mode::SplitLora => run_training(config),
        Mode::CenLora => run_baseline_cenlora(config),
        Mode::FedLora => run_baseline_fedlora(config),
    }
}

/// Split federated training for `config.rounds` rounds.
pub fn run_training(config: &TrainingConfig) -> Result<TrainingLog> {
    let setup = prepare(config)?;
    run_training_from(&setup)
}

pub fn run_training_from(setup: &Setup) -> Result<TrainingLog> {
    let config = &setup.config;
    let ctx = setup.round_context();
    let mut clients: Vec<ClientNode> = setup
        .partitions
        .iter()
        .zip(&setup.batch_rngs)
        .enumerate()
        .map(|(i, (d, rng))| ClientNode::new(i, d.clone(), setup.client_adapters(), rng.clone()))
        .collect();
    let mut server = ServerNode { adapters: setup.server_adapters() };
    let mut transport = Transport::new(config.costs.wire);
    let mut ledger = CostLedger::default();
    let mut records = Vec::with_capacity(config.rounds);
    let mut aggregation_rounds = Vec::new();
    let mut checkpoints = Vec::new();

    for t in 1..=config.rounds as u64 {
        let mut outcome =
            run_round(t, &ctx, &mut clients, &mut server, &mut transport, &mut ledger).map_err(|e| e.in_phase(&format!("round {t}")))?;
        if is_aggregation_round(config, t) {
            let (_, agg) = run_aggregation(t, &mut clients, &setup.weights, &mut transport, &mut ledger)
                .map_err(|e| e.in_phase(&format!("round {t}")))?;
            outcome.trace.aggregation = Some(agg);
            aggregation_rounds.push(t);
        }
        ledger.advance(&outcome.trace, &config.costs.compute, &config.costs.links)?;
        records.push(record(t, &outcome.loss, &ledger));
        if checkpoint_due(config, t) {
            for c in &clients {
                checkpoints.push(Checkpoint { round: t, label: client_name(c.id), set: c.adapters.clone() });
            }
            checkpoints.push(Checkpoint { round: t, label: SERVER.into(), set: server.adapters.clone() });
        }
    }

    let client_sets: Vec<AdapterSet> = clients.into_iter().map(|c| c.adapters).collect();
    let global_client = aggregate(&client_sets, &setup.weights)?;
    let global = global_client.union(&server.adapters)?;
    let eval = evaluate(setup.model.base(), &global, &setup.eval)?;
    let (c, s) = (count_trainable(&global_client), count_trainable(&server.adapters));
    Ok(TrainingLog {
        mode: Mode::SplitLora,
        records,
        aggregation_rounds,
        checkpoints,
        final_adapters: FinalAdapters { clients: client_sets, server: Some(server.adapters), global },
        initial_adapters: setup.adapters.clone(),
        eval,
        trainable: TrainableCounts { client_side: c, server_side: s, total: c + s },
        messages: transport.into_log(),
    })
}

/// Full forward and backward pass of the whole model on one batch split
/// into contiguous slices. Returns the loss, the updated set and the forward
/// FLOPs.
fn full_step(setup: &Setup, adapters: &AdapterSet, batch: &Batch, slices: &[ClientSlice]) -> Result<(LossReport, AdapterSet, u64)> {
    let part = setup.model.base().full();
    let (logits, cache) = part.forward(adapters, PartInput::Tokens(&batch.x))?;
    let (loss, g) = compute_loss(&logits, batch.y.tokens(), slices)?;
    let fwd = flops_of_pass(&part.dense_products(adapters), logits.rows(), Direction::Forward);
    let (grads, _) = part.backward(adapters, cache, &g)?;
    let updated = adapters.sgd_step(&grads, |s| setup.lr_for(s))?;
    Ok((loss, updated, fwd))
}

fn no_bytes_trace(clients: usize, per_client: &[(u64, u64)]) -> RoundTrace {
    RoundTrace {
        clients: (0..clients).map(|i| ClientPhases::complete(per_client[i].0, 0, 0, per_client[i].1)).collect(),
        server_flops: Some(0),
        aggregation: None,
    }
}

/// Centralized LoRA: one party holds the whole model and, every round,
/// trains on the concatenation of the batches the clients would have drawn.
pub fn run_baseline_cenlora(config: &TrainingConfig) -> Result<TrainingLog> {
    let setup = prepare(config)?;
    run_cenlora_from(&setup)
}

pub fn run_cenlora_from(setup: &Setup) -> Result<TrainingLog> {
    let config = &setup.config;
    let mut rngs = setup.batch_rngs.clone();
    let mut adapters = setup.adapters.clone();
    let mut ledger = CostLedger::default();
    let mut records = Vec::with_capacity(config.rounds);
    let mut checkpoints = Vec::new();

    for t in 1..=config.rounds as u64 {
        let mut step = || -> Result<(LossReport, AdapterSet, u64)> {
            let batches = setup
                .partitions
                .iter()
                .zip(rngs.iter_mut())
                .map(|(d, rng)| sample_minibatch(d, config.batch_size, rng))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<usize> = batches.iter().map(Batch::token_rows).collect();
            let batch = Batch::concat(&batches.iter().collect::<Vec<_>>())?;
            full_step(setup, &adapters, &batch, &ClientSlice::by_rows(&rows))
        };
        let (mut loss, updated, fwd) = step().map_err(|e| e.in_phase(&format!("round {t}")))?;
        adapters = updated;
        ledger.add_flops(CENTRALIZED, 3 * fwd);
        ledger.advance(&no_bytes_trace(1, &[(fwd, 2 * fwd)]), &config.costs.compute, &config.costs.links)?;
        // the objective is the plain mean over all rows, reported as one party
        loss.per_client_ce = vec![loss.mean_ce];
        records.push(record(t, &loss, &ledger));
        if checkpoint_due(config, t) {
            checkpoints.push(Checkpoint { round: t, label: "model".into(), set: adapters.clone() });
        }
    }

    let eval = evaluate(setup.model.base(), &adapters, &setup.eval)?;
    let total = count_trainable(&adapters);
    Ok(TrainingLog {
        mode: Mode::CenLora,
        records,
        aggregation_rounds: Vec::new(),
        checkpoints,
        final_adapters: FinalAdapters { clients: Vec::new(), server: None, global: adapters },
        initial_adapters: setup.adapters.clone(),
        eval,
        trainable: TrainableCounts { client_side: total, server_side: 0, total },
        messages: Vec::new(),
    })
}

/// Federated LoRA: every client trains the whole model on its own data and
/// the full adapter sets are averaged every `aggregation_interval` rounds.
pub fn run_baseline_fedlora(config: &TrainingConfig) -> Result<TrainingLog> {
    let setup = prepare(config)?;
    run_fedlora_from(&setup)
}

pub fn run_fedlora_from(setup: &Setup) -> Result<TrainingLog> {
    let config = &setup.config;
    let mut clients: Vec<ClientNode> = setup
        .partitions
        .iter()
        .zip(&setup.batch_rngs)
        .enumerate()
        .map(|(i, (d, rng))| ClientNode::new(i, d.clone(), setup.adapters.clone(), rng.clone()))
        .collect();
    let mut transport = Transport::new(config.costs.wire);
    let mut ledger = CostLedger::default();
    let mut records = Vec::with_capacity(config.rounds);
    let mut aggregation_rounds = Vec::new();
    let mut checkpoints = Vec::new();

    for t in 1..=config.rounds as u64 {
        let phase = format!("round {t}");
        let mut per_client_ce = Vec::with_capacity(clients.len());
        let mut costs = Vec::with_capacity(clients.len());
        for c in clients.iter_mut() {
            let batch = c.draw_batch(config.batch_size).map_err(|e| e.in_phase(&phase))?;
            let slices = ClientSlice::by_rows(&[batch.token_rows()]);
            let (loss, updated, fwd) = full_step(setup, &c.adapters, &batch, &slices).map_err(|e| e.in_phase(&phase))?;
            c.adapters = updated;
            ledger.add_flops(&client_name(c.id), 3 * fwd);
            per_client_ce.push(loss.mean_ce);
            costs.push((fwd, 2 * fwd));
        }
        let mut trace = no_bytes_trace(clients.len(), &costs);
        if is_aggregation_round(config, t) {
            let (_, agg) = run_aggregation(t, &mut clients, &setup.weights, &mut transport, &mut ledger).map_err(|e| e.in_phase(&phase))?;
            trace.aggregation = Some(agg);
            aggregation_rounds.push(t);
        }
        ledger.advance(&trace, &config.costs.compute, &config.costs.links)?;
        let mean_ce: f64 = per_client_ce.iter().zip(&setup.weights).map(|(ce, w)| w * ce).sum();
        let loss = LossReport { mean_ce, ppl: mean_ce.exp(), per_client_ce, weights: setup.weights.clone() };
        records.push(record(t, &loss, &ledger));
        if checkpoint_due(config, t) {
            for c in &clients {
                checkpoints.push(Checkpoint { round: t, label: client_name(c.id), set: c.adapters.clone() });
            }
        }
    }

    let client_sets: Vec<AdapterSet> = clients.into_iter().map(|c| c.adapters).collect();
    let global = aggregate(&client_sets, &setup.weights)?;
    let eval = evaluate(setup.model.base(), &global, &setup.eval)?;
    let total = count_trainable(&global);
    Ok(TrainingLog {
        mode: Mode::FedLora,
        records,
        aggregation_rounds,
        checkpoints,
        final_adapters: FinalAdapters { clients: client_sets, server: None, global },
        initial_adapters: setup.adapters.clone(),
        eval,
        trainable: TrainableCounts { client_side: total, server_side: 0, total },
        messages: transport.into_log(),
    })
}
