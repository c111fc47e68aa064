//! Transport-independent round logic for sites, the aggregation server and
//! the coordination server. Both runtimes drive these through encoded
//! [`WireMessage`]s, so the in-process and socket paths share every
//! arithmetic step.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::config::{Algorithm, DropoutMode, FederationConfig};
use super::dropout::DropoutState;
use super::metrics::RoundMetrics;
use super::pairing::pair_active_sites;
use super::OrchestrationError;
use crate::algorithms::{dcml_step, fedavg_aggregate, gcml_merge, DcmlConfig, MergeMode, SiteUpdate};
use crate::data::FederatedDataset;
use crate::params::ParameterVector;
use crate::rng::{derive_rng, derive_seed};
use crate::training::{evaluate, init_params, train_rounds, LabeledDataset, TrainerSpec};
use crate::wire::{PlanEntry, Role, WireMessage};

const STREAM_SERVER: u64 = 0x5e7e;

/// Per-site, per-round stream for minibatch shuffling.
pub(crate) fn training_stream(site_id: u64, round: u64) -> u64 {
    derive_seed(site_id, &[round])
}

/// A site's view of one round, decided by the broadcast plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteStatus {
    Active(Role),
    Dropped,
}

impl SiteStatus {
    pub fn label(self) -> &'static str {
        match self {
            SiteStatus::Active(r) => r.as_str(),
            SiteStatus::Dropped => "dropped",
        }
    }

    pub fn from_plan(site_id: u64, entries: &[PlanEntry]) -> (Self, Option<u64>) {
        match entries.iter().find(|e| e.site_id == site_id) {
            Some(e) => (SiteStatus::Active(e.role), e.peer_id),
            None => (SiteStatus::Dropped, None),
        }
    }
}

/// What a GCML site must do after reading the round plan.
#[derive(Debug, Clone, PartialEq)]
pub struct GcmlAction {
    pub status: SiteStatus,
    /// Receiver entry and the transfer to dial it with.
    pub transfer: Option<(PlanEntry, WireMessage)>,
    /// Sender id whose transfer this site must wait for.
    pub await_from: Option<u64>,
}

/// One participating site: local data, local model and the round logic.
#[derive(Debug, Clone)]
pub struct Site {
    id: u64,
    spec: TrainerSpec,
    train: LabeledDataset,
    validation: LabeledDataset,
    test: Arc<LabeledDataset>,
    params: ParameterVector,
    last_global: Option<ParameterVector>,
    was_dropped: bool,
    last_val_loss: f64,
    mu: f64,
    dcml: DcmlConfig,
    merge_mode: MergeMode,
    dropout_mode: DropoutMode,
    rejoin_with_global: bool,
    bytes_sent: u64,
    bytes_received: u64,
}

impl Site {
    pub fn new(config: &FederationConfig, site_id: u64, data: &FederatedDataset) -> Result<Self, OrchestrationError> {
        let idx = config.site_index(site_id)?;
        let part = &data.sites[idx];
        let params = init_params(&config.trainer);
        let last_val_loss = evaluate(&config.trainer, &params, &part.validation)?.loss;
        Ok(Self {
            id: site_id,
            spec: config.trainer.clone(),
            train: part.train.clone(),
            validation: part.validation.clone(),
            test: Arc::clone(&data.test),
            params,
            last_global: None,
            was_dropped: false,
            last_val_loss,
            mu: if config.algorithm == Algorithm::Fedprox { config.mu } else { 0.0 },
            dcml: DcmlConfig {
                lambda: config.lambda,
                learning_rate: config.trainer.learning_rate,
                kl_cap: config.kl_cap,
            },
            merge_mode: config.merge_mode,
            dropout_mode: config.dropout.mode,
            rejoin_with_global: config.rejoin_with_global,
            bytes_sent: 0,
            bytes_received: 0,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn case_count(&self) -> u64 {
        self.train.len() as u64
    }

    pub fn register_message(&self, host: &str, port: u16) -> WireMessage {
        WireMessage::Register {
            site_id: self.id,
            listen_host: host.to_string(),
            listen_port: port,
            case_count: self.case_count(),
        }
    }

    pub fn record_sent(&mut self, bytes: usize) {
        self.bytes_sent += bytes as u64;
    }

    pub fn record_received(&mut self, bytes: usize) {
        self.bytes_received += bytes as u64;
    }

    fn local_training(&mut self, round: u64, global: Option<&ParameterVector>) -> Result<(), OrchestrationError> {
        let mu = if global.is_some() { self.mu } else { 0.0 };
        self.params = train_rounds(&self.spec, &self.params, &self.train, mu, global, training_stream(self.id, round))?;
        Ok(())
    }

    /// Centralized round. Active sites adopt the global model, train and
    /// return their update; dropped sites train locally (disconnect) or
    /// idle (shutdown).
    pub fn central_round(
        &mut self,
        round: u64,
        active: bool,
        global: Option<&ParameterVector>,
    ) -> Result<Option<SiteUpdate>, OrchestrationError> {
        if active {
            let global = global.ok_or_else(|| {
                OrchestrationError::Protocol(format!("site {} active in round {round} without a global model", self.id))
            })?;
            if !(self.was_dropped && !self.rejoin_with_global) {
                self.params = global.clone();
            }
            self.last_global = Some(global.clone());
            self.was_dropped = false;
            let g = self.last_global.clone();
            self.local_training(round, g.as_ref())?;
            return Ok(Some(SiteUpdate {
                site_id: self.id,
                case_count: self.case_count(),
                params: self.params.clone(),
            }));
        }
        self.was_dropped = true;
        if self.dropout_mode == DropoutMode::Disconnect {
            let g = self.last_global.clone();
            self.local_training(round, g.as_ref())?;
        }
        Ok(None)
    }

    /// Reads the GCML plan. A sender ships a copy of its current model
    /// before its own local training.
    pub fn gcml_begin(&mut self, round: u64, entries: &[PlanEntry]) -> GcmlAction {
        let (status, peer) = SiteStatus::from_plan(self.id, entries);
        let mut action = GcmlAction { status, transfer: None, await_from: None };
        match status {
            SiteStatus::Active(Role::Sender) => {
                let peer = peer.expect("sender entries carry a peer");
                if let Some(target) = entries.iter().find(|e| e.site_id == peer) {
                    let msg = WireMessage::ModelTransfer {
                        round,
                        sender_id: self.id,
                        validation_loss: self.last_val_loss,
                        params: self.params.clone(),
                    };
                    action.transfer = Some((target.clone(), msg));
                }
            }
            SiteStatus::Active(Role::Receiver) => action.await_from = peer,
            _ => {}
        }
        action
    }

    /// Receiver step: mutual learning with the incoming model on local
    /// data, then the validation-weighted merge.
    pub fn gcml_receive(&mut self, incoming: &ParameterVector) -> Result<(), OrchestrationError> {
        let out = dcml_step(&self.params, incoming, &self.train, &self.dcml, &self.spec, None)?;
        let v_r = evaluate(&self.spec, &out.receiver, &self.validation)?.loss;
        let v_s = evaluate(&self.spec, &out.sender, &self.validation)?.loss;
        self.params = gcml_merge(&out.receiver, &out.sender, v_r, v_s, self.merge_mode)?;
        Ok(())
    }

    /// Local training for the round and the status report, if connected.
    pub fn gcml_finish(&mut self, round: u64, status: SiteStatus) -> Result<Option<WireMessage>, OrchestrationError> {
        match status {
            SiteStatus::Dropped => {
                if self.dropout_mode == DropoutMode::Disconnect {
                    self.local_training(round, None)?;
                }
                Ok(None)
            }
            SiteStatus::Active(_) => {
                self.local_training(round, None)?;
                self.last_val_loss = evaluate(&self.spec, &self.params, &self.validation)?.loss;
                Ok(Some(WireMessage::StatusUpdate {
                    site_id: self.id,
                    round,
                    active: true,
                    validation_loss: self.last_val_loss,
                }))
            }
        }
    }

    /// Independent training only, for the individual baseline.
    pub fn individual_round(&mut self, round: u64) -> Result<(), OrchestrationError> {
        self.local_training(round, None)
    }

    pub fn test_metrics(&self) -> Result<(f64, Option<f64>), OrchestrationError> {
        let ev = evaluate(&self.spec, &self.params, &self.test)?;
        Ok((ev.loss, ev.accuracy))
    }

    /// Metrics for the current local model; resets the byte counters.
    pub fn metrics_row(&mut self, round: u64, role: &str, wall_ms: f64) -> Result<RoundMetrics, OrchestrationError> {
        let train = evaluate(&self.spec, &self.params, &self.train)?;
        let val = evaluate(&self.spec, &self.params, &self.validation)?;
        let test = evaluate(&self.spec, &self.params, &self.test)?;
        let row = RoundMetrics {
            round,
            site_id: Some(self.id),
            role: role.to_string(),
            train_loss: Some(train.loss),
            val_loss: Some(val.loss),
            test_loss: Some(test.loss),
            test_accuracy: test.accuracy,
            bytes_sent: self.bytes_sent,
            bytes_received: self.bytes_received,
            wall_ms,
        };
        self.bytes_sent = 0;
        self.bytes_received = 0;
        Ok(row)
    }
}

/// Registry shared by both server roles.
#[derive(Debug, Clone, Default)]
struct Registry {
    addresses: BTreeMap<u64, (String, u16)>,
    case_counts: BTreeMap<u64, u64>,
    expected: BTreeSet<u64>,
}

impl Registry {
    fn new(config: &FederationConfig) -> Self {
        Self { expected: config.site_ids().into_iter().collect(), ..Default::default() }
    }

    fn register(&mut self, msg: &WireMessage) -> Result<u64, OrchestrationError> {
        match msg {
            WireMessage::Register { site_id, listen_host, listen_port, case_count } => {
                if !self.expected.contains(site_id) {
                    return Err(OrchestrationError::Protocol(format!("registration from unknown site {site_id}")));
                }
                self.addresses.insert(*site_id, (listen_host.clone(), *listen_port));
                self.case_counts.insert(*site_id, *case_count);
                Ok(*site_id)
            }
            other => Err(OrchestrationError::Protocol(format!("expected REGISTER, got {}", other.kind()))),
        }
    }

    fn missing(&self) -> Vec<u64> {
        self.expected.iter().copied().filter(|s| !self.addresses.contains_key(s)).collect()
    }

    fn address(&self, id: u64) -> (String, u16) {
        self.addresses.get(&id).cloned().unwrap_or_else(|| ("".into(), 0))
    }
}

/// The plan broadcast for one round, kept for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub round: u64,
    pub entries: Vec<PlanEntry>,
    pub dropped: Vec<u64>,
}

impl PlanRecord {
    pub fn message(&self) -> WireMessage {
        WireMessage::RoundPlan { round: self.round, entries: self.entries.clone() }
    }
}

/// Centralized aggregation server state.
#[derive(Debug)]
pub struct AggregationServer {
    registry: Registry,
    dropout: DropoutState,
    rng: ChaCha8Rng,
    global: ParameterVector,
    round: u64,
    rounds: u64,
    spec: TrainerSpec,
    test: Arc<LabeledDataset>,
}

impl AggregationServer {
    pub fn new(config: &FederationConfig, test: Arc<LabeledDataset>) -> Self {
        Self {
            registry: Registry::new(config),
            dropout: DropoutState::new(config.site_ids(), config.dropout.n_max, config.dropout.mode),
            rng: derive_rng(config.seed, &[STREAM_SERVER]),
            global: init_params(&config.trainer),
            round: 0,
            rounds: config.rounds,
            spec: config.trainer.clone(),
            test,
        }
    }

    pub fn register(&mut self, msg: &WireMessage) -> Result<u64, OrchestrationError> {
        self.registry.register(msg)
    }

    pub fn missing_registrations(&self) -> Vec<u64> {
        self.registry.missing()
    }

    pub fn registered_sites(&self) -> Vec<(u64, String, u16)> {
        self.registry.addresses.iter().map(|(id, (h, p))| (*id, h.clone(), *p)).collect()
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.rounds
    }

    /// Advances the dropout chain and lists the sites taking part.
    pub fn begin_round(&mut self) -> Result<PlanRecord, OrchestrationError> {
        self.round += 1;
        self.dropout.advance(&mut self.rng);
        let active = self.dropout.active();
        if active.is_empty() {
            return Err(OrchestrationError::NoActiveSites(self.round));
        }
        let entries = active
            .iter()
            .map(|&id| {
                let (host, port) = self.registry.address(id);
                PlanEntry { site_id: id, host, port, role: Role::Idle, peer_id: None }
            })
            .collect();
        Ok(PlanRecord { round: self.round, entries, dropped: self.dropout.dropped().iter().copied().collect() })
    }

    pub fn global_message(&self) -> WireMessage {
        WireMessage::GlobalModel { round: self.round, params: self.global.clone() }
    }

    /// Aggregates the updates received this round, in site-id order.
    /// With nothing received the global model is kept.
    pub fn finish_round(&mut self, mut updates: Vec<SiteUpdate>) -> Result<usize, OrchestrationError> {
        updates.sort_by_key(|u| u.site_id);
        updates.dedup_by_key(|u| u.site_id);
        if updates.is_empty() {
            log::warn!("round {}: no updates received, keeping the global model", self.round);
            return Ok(0);
        }
        for u in &mut updates {
            // trust the registered case count over the submitted one
            if let Some(&m) = self.registry.case_counts.get(&u.site_id) {
                u.case_count = m;
            }
        }
        self.global = fedavg_aggregate(&updates)?;
        Ok(updates.len())
    }

    pub fn metrics_row(&self, bytes_sent: u64, bytes_received: u64, wall_ms: f64) -> Result<RoundMetrics, OrchestrationError> {
        let test = evaluate(&self.spec, &self.global, &self.test)?;
        Ok(RoundMetrics {
            round: self.round,
            site_id: None,
            role: "aggregator".into(),
            train_loss: None,
            val_loss: None,
            test_loss: Some(test.loss),
            test_accuracy: test.accuracy,
            bytes_sent,
            bytes_received,
            wall_ms,
        })
    }
}

/// What the coordinator knows about one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMetadata {
    pub site_id: u64,
    pub host: String,
    pub port: u16,
    pub active: bool,
    pub case_count: u64,
    pub last_validation_loss: Option<f64>,
    /// Role in the most recent plan; `None` when not scheduled.
    pub role: Option<Role>,
    pub peer_id: Option<u64>,
}

/// Decentralized coordination server: tracks metadata only, never models.
#[derive(Debug)]
pub struct Coordinator {
    registry: Registry,
    dropout: DropoutState,
    rng: ChaCha8Rng,
    round: u64,
    rounds: u64,
    timed_out: BTreeSet<u64>,
    statuses: BTreeMap<u64, (u64, f64)>,
}

impl Coordinator {
    pub fn new(config: &FederationConfig) -> Self {
        Self {
            registry: Registry::new(config),
            dropout: DropoutState::new(config.site_ids(), config.dropout.n_max, config.dropout.mode),
            rng: derive_rng(config.seed, &[STREAM_SERVER]),
            round: 0,
            rounds: config.rounds,
            timed_out: BTreeSet::new(),
            statuses: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, msg: &WireMessage) -> Result<u64, OrchestrationError> {
        self.registry.register(msg)
    }

    pub fn missing_registrations(&self) -> Vec<u64> {
        self.registry.missing()
    }

    pub fn registered_sites(&self) -> Vec<(u64, String, u16)> {
        self.registry.addresses.iter().map(|(id, (h, p))| (*id, h.clone(), *p)).collect()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.rounds
    }

    /// Applies the dropout chain, pairs the active sites and builds the
    /// plan. Sites that missed the previous status deadline sit this round
    /// out.
    pub fn plan_round(&mut self) -> Result<PlanRecord, OrchestrationError> {
        self.round += 1;
        self.dropout.advance(&mut self.rng);
        let skipped = std::mem::take(&mut self.timed_out);
        let active: Vec<u64> = self.dropout.active().into_iter().filter(|s| !skipped.contains(s)).collect();
        if active.is_empty() {
            return Err(OrchestrationError::NoActiveSites(self.round));
        }
        let pairing = pair_active_sites(&active, &mut self.rng);
        let entries = pairing.to_entries(|id| self.registry.address(id));
        let mut dropped: Vec<u64> = self.dropout.dropped().iter().copied().collect();
        dropped.extend(skipped);
        dropped.sort_unstable();
        dropped.dedup();
        Ok(PlanRecord { round: self.round, entries, dropped })
    }

    pub fn ingest_status(&mut self, msg: &WireMessage) -> Result<(), OrchestrationError> {
        match msg {
            WireMessage::StatusUpdate { site_id, round, validation_loss, .. } => {
                self.statuses.insert(*site_id, (*round, *validation_loss));
                Ok(())
            }
            other => Err(OrchestrationError::Protocol(format!(
                "coordinator received {}; it only accepts metadata",
                other.kind()
            ))),
        }
    }

    /// Last reported `(round, validation_loss)` per site.
    pub fn statuses(&self) -> &BTreeMap<u64, (u64, f64)> {
        &self.statuses
    }

    /// Metadata table as of the latest plan.
    pub fn site_metadata(&self, plan: Option<&PlanRecord>) -> Vec<SiteMetadata> {
        self.registry
            .addresses
            .iter()
            .map(|(&id, (host, port))| {
                let entry = plan.and_then(|p| p.entries.iter().find(|e| e.site_id == id));
                SiteMetadata {
                    site_id: id,
                    host: host.clone(),
                    port: *port,
                    active: !self.dropout.is_dropped(id),
                    case_count: self.registry.case_counts.get(&id).copied().unwrap_or(0),
                    last_validation_loss: self.statuses.get(&id).map(|s| s.1),
                    role: entry.map(|e| e.role),
                    peer_id: entry.and_then(|e| e.peer_id),
                }
            })
            .collect()
    }

    pub fn mark_timed_out(&mut self, sites: impl IntoIterator<Item = u64>) {
        self.timed_out.extend(sites);
    }
}
