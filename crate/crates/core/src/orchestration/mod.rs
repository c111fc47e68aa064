//! Federation runtimes: centralized aggregation, decentralized GCML
//! coordination, and the two baselines.
//!
//! [`run_in_process`] drives the same node state machines as the socket
//! runtime in [`socket`], passing every message through the wire codec.

pub mod config;
pub mod dropout;
pub mod metrics;
pub mod node;
pub mod pairing;
pub mod socket;

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

pub use config::{load_config, parse_config, Algorithm, ConfigError, DropoutMode, DropoutSettings, FederationConfig, SiteAddress};
pub use dropout::{dropout_step, DropoutState, Transition};
pub use metrics::{append_jsonl, read_jsonl, write_jsonl, RoundMetrics};
pub use node::{AggregationServer, Coordinator, GcmlAction, PlanRecord, Site, SiteMetadata, SiteStatus};
pub use pairing::{pair_active_sites, Pairing};

use crate::algorithms::AlgoError;
use crate::data::{generate_federation, DataError, FederatedDataset};
use crate::params::{ParamError, ParameterVector};
use crate::rng::derive_seed;
use crate::training::{evaluate, init_params, train_rounds, TrainError};
use crate::wire::{decode_message, encode_message, WireError, WireMessage};

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("no active sites at the start of round {0}")]
    NoActiveSites(u64),
    #[error("registration timed out; missing sites {0:?}")]
    RegistrationTimeout(Vec<u64>),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("site process failed: {0}")]
    SiteFailed(String),
}

impl OrchestrationError {
    /// Whether the failure stems from configuration or input validation
    /// rather than from the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, OrchestrationError::Config(_) | OrchestrationError::Data(_))
    }
}

/// Final test metrics of one site's local model.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFinal {
    pub site_id: u64,
    pub train_count: u64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// Everything a run produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub history: Vec<RoundMetrics>,
    /// Aggregated (centralized) or pooled model; `None` for GCML and
    /// individual runs.
    pub global_model: Option<ParameterVector>,
    pub site_models: BTreeMap<u64, ParameterVector>,
    pub plans: Vec<PlanRecord>,
    /// Type codes of every frame received by the server or coordinator.
    pub server_inbox: Vec<u8>,
    pub site_finals: Vec<SiteFinal>,
    /// Test loss of the global model, or the across-site mean.
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
}

impl RunOutcome {
    fn finish_from_sites(&mut self, sites: &[Site]) -> Result<(), OrchestrationError> {
        for s in sites {
            let (loss, acc) = s.test_metrics()?;
            self.site_models.insert(s.id(), s.params().clone());
            self.site_finals.push(SiteFinal {
                site_id: s.id(),
                train_count: s.case_count(),
                test_loss: loss,
                test_accuracy: acc,
            });
        }
        if self.global_model.is_none() {
            let n = self.site_finals.len() as f64;
            self.final_test_loss = self.site_finals.iter().map(|f| f.test_loss).sum::<f64>() / n;
            self.final_test_accuracy = self
                .site_finals
                .iter()
                .map(|f| f.test_accuracy)
                .sum::<Option<f64>>()
                .map(|a| a / n);
        }
        Ok(())
    }
}

/// Encodes and decodes `msg`, as a socket hop would.
fn relay(msg: &WireMessage) -> Result<(WireMessage, usize), OrchestrationError> {
    let bytes = encode_message(msg)?;
    Ok((decode_message(&bytes)?, bytes.len()))
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs a whole federation in one thread with in-memory message passing.
pub fn run_in_process(config: &FederationConfig) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    let data = generate_federation(&config.layout)?;
    run_in_process_with_data(config, &data)
}

/// [`run_in_process`] over an already generated or imported federation.
pub fn run_in_process_with_data(config: &FederationConfig, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    config.validate()?;
    if data.site_count() != config.sites.len() {
        return Err(ConfigError::Invalid {
            field: "layout",
            message: format!("dataset has {} sites, config lists {}", data.site_count(), config.sites.len()),
        }
        .into());
    }
    match config.algorithm {
        Algorithm::Fedavg | Algorithm::Fedprox => run_centralized(config, data),
        Algorithm::Gcml => run_gcml(config, data),
        Algorithm::Individual => run_individual(config, data),
        Algorithm::Pooled => run_pooled(config, data),
    }
}

fn build_sites(config: &FederationConfig, data: &FederatedDataset) -> Result<Vec<Site>, OrchestrationError> {
    config.site_ids().into_iter().map(|id| Site::new(config, id, data)).collect()
}

fn run_centralized(config: &FederationConfig, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    let mut sites = build_sites(config, data)?;
    let mut server = AggregationServer::new(config, data.test.clone());
    let mut out = RunOutcome::default();
    let (mut srv_sent, mut srv_recv) = (0u64, 0u64);

    for site in &mut sites {
        let a = &config.sites[config.site_index(site.id())?];
        let (msg, n) = relay(&site.register_message(&a.host, a.port))?;
        site.record_sent(n);
        srv_recv += n as u64;
        out.server_inbox.push(msg.type_code());
        server.register(&msg)?;
    }

    while !server.is_finished() {
        let t = Instant::now();
        let plan = server.begin_round()?;
        let round = plan.round;
        let plan_msg = plan.message();
        let mut updates = Vec::new();
        for site in &mut sites {
            let (msg, n) = relay(&plan_msg)?;
            site.record_received(n);
            srv_sent += n as u64;
            let entries = match msg {
                WireMessage::RoundPlan { entries, .. } => entries,
                _ => unreachable!("relay preserves the variant"),
            };
            let (status, _) = SiteStatus::from_plan(site.id(), &entries);
            let active = status != SiteStatus::Dropped;
            let global = if active {
                let (msg, n) = relay(&server.global_message())?;
                site.record_received(n);
                srv_sent += n as u64;
                match msg {
                    WireMessage::GlobalModel { params, .. } => Some(params),
                    _ => unreachable!("relay preserves the variant"),
                }
            } else {
                None
            };
            if let Some(update) = site.central_round(round, active, global.as_ref())? {
                let submit = WireMessage::SubmitUpdate {
                    site_id: update.site_id,
                    round,
                    case_count: update.case_count,
                    params: update.params,
                };
                let (msg, n) = relay(&submit)?;
                site.record_sent(n);
                srv_recv += n as u64;
                out.server_inbox.push(msg.type_code());
                updates.push(submit_to_update(msg)?);
            }
        }
        server.finish_round(updates)?;
        let wall = elapsed_ms(t);
        for site in &mut sites {
            let role = if plan.dropped.contains(&site.id()) { "dropped" } else { "site" };
            out.history.push(site.metrics_row(round, role, wall)?);
        }
        out.history.push(server.metrics_row(srv_sent, srv_recv, wall)?);
        srv_sent = 0;
        srv_recv = 0;
        out.plans.push(plan);
    }
    let (_, n) = relay(&WireMessage::Shutdown { reason: "rounds complete".into() })?;
    for site in &mut sites {
        site.record_received(n);
    }

    let test = evaluate(&config.trainer, server.global(), &data.test)?;
    out.final_test_loss = test.loss;
    out.final_test_accuracy = test.accuracy;
    out.global_model = Some(server.global().clone());
    out.finish_from_sites(&sites)?;
    Ok(out)
}

pub(crate) fn submit_to_update(msg: WireMessage) -> Result<crate::algorithms::SiteUpdate, OrchestrationError> {
    match msg {
        WireMessage::SubmitUpdate { site_id, case_count, params, .. } => {
            Ok(crate::algorithms::SiteUpdate { site_id, case_count, params })
        }
        other => Err(OrchestrationError::Protocol(format!("expected SUBMIT_UPDATE, got {}", other.kind()))),
    }
}

fn run_gcml(config: &FederationConfig, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    let mut sites = build_sites(config, data)?;
    let index: BTreeMap<u64, usize> = sites.iter().enumerate().map(|(i, s)| (s.id(), i)).collect();
    let mut coord = Coordinator::new(config);
    let mut out = RunOutcome::default();
    let (mut c_sent, mut c_recv) = (0u64, 0u64);

    for site in &mut sites {
        let a = &config.sites[config.site_index(site.id())?];
        let (msg, n) = relay(&site.register_message(&a.host, a.port))?;
        site.record_sent(n);
        c_recv += n as u64;
        out.server_inbox.push(msg.type_code());
        coord.register(&msg)?;
    }

    while !coord.is_finished() {
        let t = Instant::now();
        let plan = coord.plan_round()?;
        let round = plan.round;
        let plan_msg = plan.message();

        let mut actions = Vec::with_capacity(sites.len());
        for site in &mut sites {
            let (msg, n) = relay(&plan_msg)?;
            site.record_received(n);
            c_sent += n as u64;
            let entries = match msg {
                WireMessage::RoundPlan { entries, .. } => entries,
                _ => unreachable!("relay preserves the variant"),
            };
            actions.push(site.gcml_begin(round, &entries));
        }

        // peer-to-peer transfers; the coordinator sees none of these
        let mut mailbox: BTreeMap<u64, (u64, ParameterVector)> = BTreeMap::new();
        for (i, action) in actions.iter().enumerate() {
            if let Some((target, msg)) = &action.transfer {
                let (msg, n) = relay(msg)?;
                sites[i].record_sent(n);
                sites[index[&target.site_id]].record_received(n);
                if let WireMessage::ModelTransfer { sender_id, params, .. } = msg {
                    mailbox.insert(target.site_id, (sender_id, params));
                }
            }
        }

        for (i, action) in actions.iter().enumerate() {
            let site = &mut sites[i];
            if let Some(from) = action.await_from {
                match mailbox.remove(&site.id()) {
                    Some((sender, params)) if sender == from => site.gcml_receive(&params)?,
                    _ => log::warn!("round {round}: site {} got no transfer from {from}; idling", site.id()),
                }
            }
            if let Some(status) = site.gcml_finish(round, action.status)? {
                let (msg, n) = relay(&status)?;
                site.record_sent(n);
                c_recv += n as u64;
                out.server_inbox.push(msg.type_code());
                coord.ingest_status(&msg)?;
            }
        }

        let wall = elapsed_ms(t);
        for (i, site) in sites.iter_mut().enumerate() {
            out.history.push(site.metrics_row(round, actions[i].status.label(), wall)?);
        }
        out.history.push(coordinator_row(round, c_sent, c_recv, wall));
        c_sent = 0;
        c_recv = 0;
        out.plans.push(plan);
    }
    out.finish_from_sites(&sites)?;
    Ok(out)
}

pub(crate) fn coordinator_row(round: u64, bytes_sent: u64, bytes_received: u64, wall_ms: f64) -> RoundMetrics {
    RoundMetrics {
        round,
        site_id: None,
        role: "coordinator".into(),
        train_loss: None,
        val_loss: None,
        test_loss: None,
        test_accuracy: None,
        bytes_sent,
        bytes_received,
        wall_ms,
    }
}

fn run_individual(config: &FederationConfig, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    let mut sites = build_sites(config, data)?;
    let mut out = RunOutcome::default();
    for round in 1..=config.rounds {
        let t = Instant::now();
        for site in &mut sites {
            site.individual_round(round)?;
        }
        let wall = elapsed_ms(t);
        for site in &mut sites {
            out.history.push(site.metrics_row(round, "individual", wall)?);
        }
    }
    out.finish_from_sites(&sites)?;
    Ok(out)
}

const STREAM_POOLED: u64 = 0x9001;

fn run_pooled(config: &FederationConfig, data: &FederatedDataset) -> Result<RunOutcome, OrchestrationError> {
    let spec = &config.trainer;
    let train = data.pooled_train()?;
    let val = data.pooled_validation()?;
    let mut w = init_params(spec);
    let mut out = RunOutcome::default();
    for round in 1..=config.rounds {
        let t = Instant::now();
        w = train_rounds(spec, &w, &train, 0.0, None, derive_seed(STREAM_POOLED, &[round]))?;
        let wall = elapsed_ms(t);
        let tr = evaluate(spec, &w, &train)?;
        let va = evaluate(spec, &w, &val)?;
        let te = evaluate(spec, &w, &data.test)?;
        out.history.push(RoundMetrics {
            round,
            site_id: None,
            role: "pooled".into(),
            train_loss: Some(tr.loss),
            val_loss: Some(va.loss),
            test_loss: Some(te.loss),
            test_accuracy: te.accuracy,
            bytes_sent: 0,
            bytes_received: 0,
            wall_ms: wall,
        });
    }
    let te = evaluate(spec, &w, &data.test)?;
    out.final_test_loss = te.loss;
    out.final_test_accuracy = te.accuracy;
    out.global_model = Some(w);
    Ok(out)
}
