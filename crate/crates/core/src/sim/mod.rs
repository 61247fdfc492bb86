//! Deterministic multi-client simulation: every random choice (keys,
//! selection, dropouts, local data) is derived from the configured seed.

mod bench;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enclave::{
    client_key_payload, client_sign, client_signing_key, derive_signing_key, verify_key_setup,
    AggregationProgram, Enclave, EnclaveError, KeySetupPayload, RecordKind, RoundVerifier,
    Transcript,
};
use crate::group::{gen_keypair, GroupParams, GroupVariant};
use crate::masking::{MaskedUpdate, OpCounter, RecoveryVector};
use crate::protocol::workload::{SyntheticUpdates, ToyTrainer, Workload};
use crate::protocol::{
    client_recovery, client_update, derive_seed, server_round, ClientPool, ClientState, Mode,
    ProtocolError, RoundOutcome, RoundPlan,
};
use crate::quantizer::{self, DEFAULT_CLIP_BOUND, DEFAULT_SCALE};

pub use bench::{bench_bytes, bench_counts, ByteRow, ClientCounts, CountCase, CountRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkloadConfig {
    /// Each local model is the global model plus a uniform draw from
    /// `[-spread, spread]` per coordinate; `spread` defaults to `B`.
    Synthetic {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spread: Option<f64>,
    },
    /// Logistic regression on per-client Gaussian blobs.
    Toy {
        features: usize,
        samples_per_client: usize,
    },
}

impl WorkloadConfig {
    pub fn model_dim(&self) -> usize {
        match self {
            WorkloadConfig::Synthetic { dim, .. } => *dim,
            WorkloadConfig::Toy { features, .. } => features + 1,
        }
    }
}

fn default_fraction() -> f64 {
    1.0
}
fn default_rounds() -> u64 {
    1
}
fn default_scale() -> f64 {
    DEFAULT_SCALE
}
fn default_clip_bound() -> f64 {
    DEFAULT_CLIP_BOUND
}
fn default_mode() -> Mode {
    Mode::Scaling
}
fn default_group() -> GroupVariant {
    GroupVariant::Test
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: String,
    /// Number of registered clients `S`.
    pub clients: u64,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<u64>,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    /// Fixes the message space: 32-bit scaling, or the 8/16-bit quantizer.
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Scaling factor `L`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Clip bound `B`.
    #[serde(default = "default_clip_bound")]
    pub clip_bound: f64,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub attested: bool,
    #[serde(default = "default_group")]
    pub group: GroupVariant,
    /// Run the plaintext FedAvg oracle in lockstep.
    #[serde(default = "default_true")]
    pub oracle: bool,
    /// Record wall-clock time; off keeps metrics byte-reproducible.
    #[serde(default)]
    pub wall_clock: bool,
    pub workload: WorkloadConfig,
}

impl SimConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(seed: &str, clients: u64, workload: WorkloadConfig) -> Self {
        Self {
            seed: seed.to_string(),
            clients,
            fraction: default_fraction(),
            group_size: None,
            rounds: default_rounds(),
            mode: default_mode(),
            scale: default_scale(),
            clip_bound: default_clip_bound(),
            dropout_rate: 0.0,
            attested: false,
            group: default_group(),
            oracle: true,
            wall_clock: false,
            workload,
        }
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.seed.is_empty() {
            out.push("seed must not be empty".to_string());
        }
        if self.clients == 0 {
            out.push("clients must be at least 1".to_string());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            out.push(format!("fraction must be in (0, 1], got {}", self.fraction));
        }
        if self.group_size == Some(0) {
            out.push("group_size must be at least 1".to_string());
        }
        if self.rounds == 0 {
            out.push("rounds must be at least 1".to_string());
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            out.push(format!(
                "scale must be finite and positive, got {}",
                self.scale
            ));
        }
        if !(self.clip_bound.is_finite() && self.clip_bound > 0.0) {
            out.push(format!(
                "clip_bound must be finite and positive, got {}",
                self.clip_bound
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            out.push(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        match &self.workload {
            WorkloadConfig::Synthetic { dim, spread } => {
                if *dim == 0 {
                    out.push("workload.dim must be at least 1".to_string());
                }
                if let Some(s) = spread {
                    if !(s.is_finite() && *s >= 0.0) {
                        out.push(format!(
                            "workload.spread must be finite and non-negative, got {s}"
                        ));
                    }
                }
            }
            WorkloadConfig::Toy {
                features,
                samples_per_client,
            } => {
                if *features == 0 {
                    out.push("workload.features must be at least 1".to_string());
                }
                if *samples_per_client == 0 {
                    out.push("workload.samples_per_client must be at least 1".to_string());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Config(problems))
        }
    }

    fn program(&self) -> AggregationProgram {
        AggregationProgram {
            fraction: self.fraction,
            group_size: self.group_size,
            mode: self.mode,
            scale: self.scale,
            clip_bound: self.clip_bound,
            initial_model: vec![0.0; self.workload.model_dim()],
            seed: self.seed.as_bytes().to_vec(),
        }
    }

    fn workload_for(&self, id: u64) -> Workload {
        match &self.workload {
            WorkloadConfig::Synthetic { spread, .. } => Workload::Synthetic(SyntheticUpdates {
                seed: self.seed.as_bytes().to_vec(),
                spread: spread.unwrap_or(self.clip_bound),
            }),
            WorkloadConfig::Toy {
                features,
                samples_per_client,
            } => Workload::Toy(ToyTrainer::gaussian_blobs(
                self.seed.as_bytes(),
                id,
                *samples_per_client,
                *features,
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Setup,
    Mask,
    Recover,
    Aggregate,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Mask => "mask",
            Phase::Recover => "recover",
            Phase::Aggregate => "aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub phase: Phase,
    pub hash_count: u64,
    pub bytes_sent: u64,
    pub elapsed_ns: u64,
    /// Only on aggregate rows, and only when the oracle runs.
    pub max_abs_error: Option<f64>,
}

pub const METRICS_HEADER: &str = "round,phase,hash_count,bytes_sent,elapsed_ns,max_abs_error";

/// CSV with a fixed header; a missing error is an empty field.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let err = r.max_abs_error.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.phase.as_str(),
            r.hash_count,
            r.bytes_sent,
            r.elapsed_ns,
            err
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub plan: RoundPlan,
    pub dropped: Vec<u64>,
    pub outcome: RoundOutcome,
    /// Elementwise bound the secure result must meet against the oracle.
    pub error_bound: f64,
    pub max_abs_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub final_model: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
    pub rounds: Vec<RoundRecord>,
    /// Present for attested runs.
    pub transcript: Option<Transcript>,
    pub enclave_key: Option<VerifyingKey>,
    pub client_keys: BTreeMap<u64, VerifyingKey>,
}

impl SimReport {
    pub fn final_model_bytes(&self) -> Vec<u8> {
        self.final_model
            .iter()
            .flat_map(|v| v.to_be_bytes())
            .collect()
    }
}

/// Which selected clients fail to submit in `round`: `floor(rate * n)` of
/// them, drawn uniformly from the run seed.
pub fn draw_dropouts(seed: &[u8], round: u64, selected: &[u64], rate: f64) -> Vec<u64> {
    let n = selected.len();
    let d = ((rate * n as f64 + 1e-9).floor() as usize).min(n.saturating_sub(1));
    let mut rng = ChaCha20Rng::from_seed(derive_seed(seed, "dropout", round));
    let mut out: Vec<u64> = index::sample(&mut rng, n, d)
        .into_iter()
        .map(|i| selected[i])
        .collect();
    out.sort_unstable();
    out
}

/// Plaintext FedAvg over `responders` from `plan.global_model`.
pub fn fedavg_oracle(
    clients: &BTreeMap<u64, ClientState>,
    plan: &RoundPlan,
    responders: &[u64],
) -> Vec<f64> {
    if responders.is_empty() {
        return plan.global_model.clone();
    }
    let mut acc = vec![0.0; plan.dim()];
    for id in responders {
        let local = clients[id].local_model(plan);
        for ((a, w), g) in acc.iter_mut().zip(&local).zip(&plan.global_model) {
            *a += match plan.mode {
                Mode::Scaling => *w,
                _ => quantizer::clip(w - g, plan.clip_bound),
            };
        }
    }
    let n = responders.len() as f64;
    acc.iter()
        .zip(&plan.global_model)
        .map(|(a, g)| match plan.mode {
            Mode::Scaling => a / n,
            _ => g + a / n,
        })
        .collect()
}

/// `1/L` in scaling mode, otherwise the largest half step among the groups.
pub fn error_bound(plan: &RoundPlan) -> Result<f64, ProtocolError> {
    let mut bound = 1.0 / plan.scale;
    if plan.mode.quant_bits().is_some() {
        bound = 0.0;
        for i in 0..plan.groups.len() {
            if let Some(q) = plan.group_quantizer(i)? {
                bound = f64::max(bound, q.half_step());
            }
        }
    }
    Ok(bound)
}

struct ClientPhase {
    updates: Vec<MaskedUpdate>,
    recoveries: Vec<RecoveryVector>,
    mask_hashes: u64,
    recovery_hashes: u64,
    mask_ns: u64,
    recovery_ns: u64,
}

struct Clock(Option<Instant>);

impl Clock {
    fn start(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    fn ns(&self) -> u64 {
        self.0.map_or(0, |t| t.elapsed().as_nanos() as u64)
    }
}

fn run_clients(
    clients: &BTreeMap<u64, ClientState>,
    plan: &RoundPlan,
    dropped: &[u64],
    wall_clock: bool,
) -> Result<ClientPhase, ProtocolError> {
    let clock = Clock::start(wall_clock);
    let mask_ops = OpCounter::new();
    let updates = plan
        .selected
        .iter()
        .filter(|id| dropped.binary_search(id).is_err())
        .map(|id| client_update(&clients[id], plan, &mask_ops))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_ns = clock.ns();

    // Every client that submitted stays online for recovery.
    let clock = Clock::start(wall_clock);
    let rec_ops = OpCounter::new();
    let mut recoveries = Vec::new();
    for group in &plan.groups {
        let d: Vec<u64> = group
            .iter()
            .copied()
            .filter(|id| dropped.binary_search(id).is_ok())
            .collect();
        if d.is_empty() || d.len() == group.len() {
            continue;
        }
        for id in group.iter().filter(|id| dropped.binary_search(id).is_err()) {
            recoveries.push(client_recovery(&clients[id], plan, &d, &rec_ops)?);
        }
    }
    Ok(ClientPhase {
        updates,
        recoveries,
        mask_hashes: mask_ops.hashes(),
        recovery_hashes: rec_ops.hashes(),
        mask_ns,
        recovery_ns: clock.ns(),
    })
}

/// Host-side view of the enclave-backed run.
struct Attested {
    enclave: Enclave,
    verifier: RoundVerifier,
    signing: BTreeMap<u64, SigningKey>,
    transcript: Transcript,
}

fn build_clients(
    cfg: &SimConfig,
    params: &GroupParams,
) -> Result<BTreeMap<u64, ClientState>, ProtocolError> {
    (1..=cfg.clients)
        .map(|id| {
            let keys = gen_keypair(params, id, cfg.seed.as_bytes())?;
            Ok((id, ClientState::new(keys, cfg.workload_for(id))))
        })
        .collect()
}

/// Key setup through the enclave. Returns the host state and the bytes of
/// all registrations.
fn attested_setup(
    cfg: &SimConfig,
    params: &GroupParams,
    clients: &mut BTreeMap<u64, ClientState>,
    program: &AggregationProgram,
) -> Result<(Attested, u64), SimError> {
    let seed = cfg.seed.as_bytes();
    let mut enclave = Enclave::new(derive_signing_key(seed, "enclave"));
    let mut transcript = Transcript::default();
    transcript.push(enclave.install(&program.to_bytes())?);

    let signing: BTreeMap<u64, SigningKey> = clients
        .keys()
        .map(|&id| (id, client_signing_key(seed, id)))
        .collect();
    let vks: BTreeMap<u64, VerifyingKey> = signing
        .iter()
        .map(|(id, sk)| (*id, sk.verifying_key()))
        .collect();
    let regs: Vec<_> = clients
        .iter()
        .map(|(&id, c)| {
            client_sign(
                &signing[&id],
                id,
                RecordKind::ClientKey,
                client_key_payload(id, &c.keys.public_key_bytes()),
            )
        })
        .collect();
    let bytes = regs.iter().map(|r| r.payload.len() as u64).sum();
    transcript.extend(regs.iter().cloned());
    let envelopes = enclave.key_setup(&regs, &vks)?;
    let vk_t = enclave.verifying_key();
    for env in &envelopes {
        let recipient = KeySetupPayload::from_bytes(&env.payload)
            .map_err(EnclaveError::from)?
            .recipient;
        let setup = verify_key_setup(env, &vk_t, recipient)?;
        let client = clients.get_mut(&recipient).ok_or_else(|| {
            EnclaveError::Rejected(format!("key setup for unknown client {recipient}"))
        })?;
        for (peer, pk) in setup.peers {
            let pk = params.decode(&pk).map_err(ProtocolError::from)?;
            client
                .keys
                .derive_shared(&pk, peer)
                .map_err(ProtocolError::from)?;
        }
    }
    transcript.extend(envelopes);
    Ok((
        Attested {
            verifier: RoundVerifier::new(vk_t),
            enclave,
            signing,
            transcript,
        },
        bytes,
    ))
}

pub fn run_sim(cfg: &SimConfig) -> Result<SimReport, SimError> {
    cfg.validate()?;
    let params = GroupParams::variant(cfg.group);
    let program = program_checked(cfg)?;
    let mut clients = build_clients(cfg, &params)?;
    let ids: Vec<u64> = clients.keys().copied().collect();
    let mut metrics = Vec::new();

    let clock = Clock::start(cfg.wall_clock);
    let setup_hashes = cfg.clients * cfg.clients.saturating_sub(1);
    let (mut attested, setup_bytes) = if cfg.attested {
        let (a, bytes) = attested_setup(cfg, &params, &mut clients, &program)?;
        (Some(a), bytes)
    } else {
        let pool = ClientPool::setup(params.clone(), clients.into_values().collect())?;
        clients = pool
            .ids()
            .into_iter()
            .map(|id| (id, pool.get(id).expect("listed").clone()))
            .collect();
        let bytes = clients
            .values()
            .map(|c| c.keys.public_key_bytes().len() as u64)
            .sum();
        (None, bytes)
    };
    metrics.push(MetricsRow {
        round: 0,
        phase: Phase::Setup,
        hash_count: setup_hashes,
        bytes_sent: setup_bytes,
        elapsed_ns: clock.ns(),
        max_abs_error: None,
    });

    let mut plan = match attested.as_mut() {
        Some(a) => {
            let env = a.enclave.attested_round(0, &[], &[])?;
            let payload = a.verifier.accept(&env)?;
            a.transcript.push(env);
            payload.next_plan
        }
        None => program.plan_round(&ids, 1, program.initial_model.clone())?,
    };

    let mut rounds = Vec::new();
    for round in 1..=cfg.rounds {
        debug_assert_eq!(plan.round, round);
        let dropped = draw_dropouts(cfg.seed.as_bytes(), round, &plan.selected, cfg.dropout_rate);
        let phase = run_clients(&clients, &plan, &dropped, cfg.wall_clock)?;
        let update_bytes: u64 = phase.updates.iter().map(|u| u.to_wire().len() as u64).sum();
        let recovery_bytes: u64 = phase
            .recoveries
            .iter()
            .map(|q| q.to_wire().len() as u64)
            .sum();

        let clock = Clock::start(cfg.wall_clock);
        let (outcome, next_plan, published) = match attested.as_mut() {
            Some(a) => {
                let sign = |kind, id: u64, payload| client_sign(&a.signing[&id], id, kind, payload);
                let updates: Vec<_> = phase
                    .updates
                    .iter()
                    .map(|u| sign(RecordKind::Update, u.client_id, u.to_wire()))
                    .collect();
                let recs: Vec<_> = phase
                    .recoveries
                    .iter()
                    .map(|q| sign(RecordKind::Recovery, q.client_id, q.to_wire()))
                    .collect();
                let env = a.enclave.attested_round(round, &updates, &recs)?;
                let payload = a.verifier.accept(&env)?;
                a.transcript.extend(updates);
                a.transcript.extend(recs);
                let published = env.payload.len() as u64;
                a.transcript.push(env);
                let outcome = payload.outcome.ok_or_else(|| {
                    EnclaveError::Rejected(format!("round {round} envelope carries no outcome"))
                })?;
                (outcome, payload.next_plan, published)
            }
            None => {
                let outcome = server_round(&plan, &phase.updates, &phase.recoveries)?;
                let next = program.plan_round(&ids, round + 1, outcome.global_model.clone())?;
                let published = outcome.to_bytes().len() as u64;
                (outcome, next, published)
            }
        };
        let aggregate_ns = clock.ns();

        let bound = error_bound(&plan)?;
        let max_abs_error = cfg.oracle.then(|| {
            let oracle = fedavg_oracle(&clients, &plan, &outcome.responders);
            oracle
                .iter()
                .zip(&outcome.global_model)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });

        metrics.push(MetricsRow {
            round,
            phase: Phase::Mask,
            hash_count: phase.mask_hashes,
            bytes_sent: update_bytes,
            elapsed_ns: phase.mask_ns,
            max_abs_error: None,
        });
        metrics.push(MetricsRow {
            round,
            phase: Phase::Recover,
            hash_count: phase.recovery_hashes,
            bytes_sent: recovery_bytes,
            elapsed_ns: phase.recovery_ns,
            max_abs_error: None,
        });
        metrics.push(MetricsRow {
            round,
            phase: Phase::Aggregate,
            hash_count: 0,
            bytes_sent: published,
            elapsed_ns: aggregate_ns,
            max_abs_error,
        });
        rounds.push(RoundRecord {
            plan: std::mem::replace(&mut plan, next_plan),
            dropped,
            outcome,
            error_bound: bound,
            max_abs_error,
        });
    }

    let final_model = rounds
        .last()
        .map(|r| r.outcome.global_model.clone())
        .unwrap_or_else(|| program.initial_model.clone());
    let (_, client_keys) = audit_keys(cfg);
    let (transcript, enclave_key) = match attested {
        Some(a) => (Some(a.transcript), Some(a.enclave.verifying_key())),
        None => (None, None),
    };
    Ok(SimReport {
        final_model,
        metrics,
        rounds,
        transcript,
        enclave_key,
        client_keys,
    })
}

/// Builds the program and checks the quantizer accepts its parameters.
fn program_checked(cfg: &SimConfig) -> Result<AggregationProgram, SimError> {
    let program = cfg.program();
    if let Some(bits) = cfg.mode.quant_bits() {
        quantizer::QuantConfig::with_scale(bits, cfg.clip_bound, 1, cfg.scale)
            .map_err(|e| SimError::Config(vec![e.to_string()]))?;
    }
    Ok(program)
}

/// Verifying keys an auditor needs for an attested run with this config.
pub fn audit_keys(cfg: &SimConfig) -> (VerifyingKey, BTreeMap<u64, VerifyingKey>) {
    let seed = cfg.seed.as_bytes();
    let clients = (1..=cfg.clients)
        .map(|id| (id, client_signing_key(seed, id).verifying_key()))
        .collect();
    (derive_signing_key(seed, "enclave").verifying_key(), clients)
}
