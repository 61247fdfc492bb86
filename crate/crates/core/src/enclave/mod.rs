//! In-process emulation of a transparent enclave: it installs an
//! aggregation program, relays signed key setup, runs each aggregation
//! round, and signs every output. Its whole state except the signing key is
//! readable by the host; only integrity is provided.
//!
//! Remote attestation is out of scope: the enclave's verification key is
//! distributed out of band (in the run configuration).

mod transcript;

use std::collections::BTreeMap;

use ed25519_dalek::{Signature, Signer as _, SigningKey, VerifyingKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::masking::{MaskError, MaskedUpdate, RecoveryVector};
use crate::protocol::{
    derive_seed, select_round, server_round, Mode, ProtocolError, RoundOutcome, RoundPlan,
    SelectionPolicy,
};

pub use transcript::{
    verify_transcript, RecordKind, SignedEnvelope, Signer, Transcript, VerifyReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnclaveError {
    #[error("no program installed")]
    NotInstalled,
    #[error("key setup already performed for this program")]
    AlreadySetUp,
    #[error("key setup has not been performed")]
    NotSetUp,
    /// The functionality's `⊥`: some signature failed, nothing changed.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("counter mismatch: enclave is at {expected}, request names {got}")]
    Replay { expected: u64, got: u64 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<MaskError> for EnclaveError {
    fn from(e: MaskError) -> Self {
        EnclaveError::Protocol(e.into())
    }
}

/// The aggregation program the enclave runs; its canonical bytes are what
/// gets hashed and signed at install time.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationProgram {
    pub fraction: f64,
    pub group_size: Option<u64>,
    pub mode: Mode,
    pub scale: f64,
    pub clip_bound: f64,
    pub initial_model: Vec<f64>,
    /// Seed from which each round's selection randomness is derived.
    pub seed: Vec<u8>,
}

impl AggregationProgram {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(b"secagg-aggregation-program/v1")
            .f64(self.fraction)
            .u64(self.group_size.unwrap_or(0))
            .u8(self.mode.modulus_bits())
            .f64(self.scale)
            .f64(self.clip_bound)
            .f64_list(&self.initial_model)
            .bytes(&self.seed);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut r = Reader::new(bytes);
        if r.bytes()? != b"secagg-aggregation-program/v1" {
            return Err(CodecError::Invalid("unknown program format".into()).into());
        }
        let fraction = r.f64()?;
        let group_size = match r.u64()? {
            0 => None,
            n => Some(n),
        };
        let mode = match r.u8()? {
            32 => Mode::Scaling,
            8 => Mode::Quant8,
            16 => Mode::Quant16,
            other => return Err(CodecError::Invalid(format!("mode width {other}")).into()),
        };
        let program = Self {
            fraction,
            group_size,
            mode,
            scale: r.f64()?,
            clip_bound: r.f64()?,
            initial_model: r.f64_list()?,
            seed: r.bytes()?.to_vec(),
        };
        r.finish()?;
        Ok(program)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy {
            fraction: self.fraction,
            group_size: self.group_size.map(|g| g as usize),
        }
    }

    /// Selection randomness for round `round`.
    pub fn round_seed(&self, round: u64) -> [u8; 32] {
        derive_seed(&self.seed, "select", round)
    }

    /// The plan for `round` over `clients` starting from `global_model`.
    pub fn plan_round(
        &self,
        clients: &[u64],
        round: u64,
        global_model: Vec<f64>,
    ) -> Result<RoundPlan, ProtocolError> {
        let (selected, groups) =
            select_round(clients, self.policy(), round, &self.round_seed(round))?;
        let plan = RoundPlan {
            round,
            selected,
            groups,
            global_model,
            mode: self.mode,
            scale: self.scale,
            clip_bound: self.clip_bound,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// One `Compute` invocation as recorded in the enclave's state log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateEntry {
    pub ctr: u64,
    pub inputs_digest: [u8; 32],
    pub outputs_digest: [u8; 32],
    pub signature: [u8; 64],
    pub rnd: [u8; 32],
}

/// Everything the host can observe.
#[derive(Debug, Clone, PartialEq)]
pub struct EnclaveState {
    pub verifying_key: [u8; 32],
    pub program_hash: Option<[u8; 32]>,
    pub program: Option<AggregationProgram>,
    pub ctr: u64,
    pub log: Vec<StateEntry>,
    /// Logs of earlier installs.
    pub archived: Vec<Vec<StateEntry>>,
    /// Per client: DH public key bytes and signing key.
    pub registry: BTreeMap<u64, (Vec<u8>, [u8; 32])>,
    pub current_plan: Option<RoundPlan>,
}

pub struct Enclave {
    signing: SigningKey,
    state: EnclaveState,
}

impl std::fmt::Debug for Enclave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Enclave")
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

/// Ed25519 key derived from a seed and a label.
pub fn derive_signing_key(seed: &[u8], label: &str) -> SigningKey {
    SigningKey::from_bytes(&derive_seed(seed, label, 0))
}

pub fn client_signing_key(seed: &[u8], client_id: u64) -> SigningKey {
    derive_signing_key(seed, &format!("client-signing/{client_id}"))
}

fn digest_all<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Payload of a client's public-key registration.
pub fn client_key_payload(client_id: u64, dh_public: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(client_id).bytes(dh_public);
    w.finish()
}

pub fn parse_client_key_payload(payload: &[u8]) -> Result<(u64, Vec<u8>), CodecError> {
    let mut r = Reader::new(payload);
    let id = r.u64()?;
    let pk = r.bytes()?.to_vec();
    r.finish()?;
    Ok((id, pk))
}

/// Decoded key-setup envelope payload addressed to one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySetupPayload {
    pub ctr: u64,
    pub recipient: u64,
    pub peers: Vec<(u64, Vec<u8>)>,
}

impl KeySetupPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.ctr)
            .u64(self.recipient)
            .u64(self.peers.len() as u64);
        for (id, pk) in &self.peers {
            w.u64(*id).bytes(pk);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let ctr = r.u64()?;
        let recipient = r.u64()?;
        let n = r.u64()?;
        if n > r.remaining() as u64 / 16 {
            return Err(CodecError::Invalid("peer count exceeds payload".into()));
        }
        let peers = (0..n)
            .map(|_| Ok((r.u64()?, r.bytes()?.to_vec())))
            .collect::<Result<_, CodecError>>()?;
        r.finish()?;
        Ok(Self {
            ctr,
            recipient,
            peers,
        })
    }
}

/// Decoded round envelope payload: `(ctr + 1, T_{ctr+1}, w^{ctr})` as the
/// next plan, plus the outcome of the round just aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPayload {
    pub ctr: u64,
    pub rnd: [u8; 32],
    pub next_plan: RoundPlan,
    pub outcome: Option<RoundOutcome>,
}

impl RoundPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.ctr)
            .raw(&self.rnd)
            .bytes(&self.next_plan.to_bytes());
        match &self.outcome {
            None => {
                w.u8(0);
            }
            Some(o) => {
                w.u8(1).bytes(&o.to_bytes());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut r = Reader::new(bytes);
        let ctr = r.u64()?;
        let rnd: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let next_plan = RoundPlan::from_bytes(r.bytes()?)?;
        let outcome = match r.u8()? {
            0 => None,
            1 => Some(RoundOutcome::from_bytes(r.bytes()?)?),
            other => return Err(CodecError::Invalid(format!("outcome flag {other}")).into()),
        };
        r.finish()?;
        Ok(Self {
            ctr,
            rnd,
            next_plan,
            outcome,
        })
    }
}

impl Enclave {
    pub fn new(signing: SigningKey) -> Self {
        let verifying_key = signing.verifying_key().to_bytes();
        Self {
            signing,
            state: EnclaveState {
                verifying_key,
                program_hash: None,
                program: None,
                ctr: 0,
                log: Vec::new(),
                archived: Vec::new(),
                registry: BTreeMap::new(),
                current_plan: None,
            },
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn state(&self) -> &EnclaveState {
        &self.state
    }

    fn sign(&self, kind: RecordKind, payload: Vec<u8>) -> SignedEnvelope {
        let signature = self
            .signing
            .sign(&transcript::signed_message(kind, &payload));
        SignedEnvelope {
            kind,
            signer: Signer::Enclave,
            payload,
            signature: signature.to_bytes(),
        }
    }

    /// Installs a program and returns the token `Sign(Hash(prog))`. Resets
    /// the counter and archives the previous log.
    pub fn install(&mut self, prog_bytes: &[u8]) -> Result<SignedEnvelope, EnclaveError> {
        let program = AggregationProgram::from_bytes(prog_bytes)?;
        let hash: [u8; 32] = Sha256::digest(prog_bytes).into();
        let previous = std::mem::take(&mut self.state.log);
        if !previous.is_empty() {
            self.state.archived.push(previous);
        }
        self.state.program_hash = Some(hash);
        self.state.program = Some(program);
        self.state.ctr = 0;
        self.state.registry.clear();
        self.state.current_plan = None;
        Ok(self.sign(RecordKind::Install, hash.to_vec()))
    }

    /// Verifies every client's signed public key and returns, for each
    /// client, the signed list of everyone else's keys at `ctr = 0`.
    pub fn key_setup(
        &mut self,
        registrations: &[SignedEnvelope],
        client_keys: &BTreeMap<u64, VerifyingKey>,
    ) -> Result<Vec<SignedEnvelope>, EnclaveError> {
        if self.state.program.is_none() {
            return Err(EnclaveError::NotInstalled);
        }
        if !self.state.registry.is_empty() || !self.state.log.is_empty() {
            return Err(EnclaveError::AlreadySetUp);
        }
        let mut registry = BTreeMap::new();
        for env in registrations {
            let id = verify_client_envelope(env, RecordKind::ClientKey, client_keys)?;
            let (payload_id, pk) = parse_client_key_payload(&env.payload)
                .map_err(|e| EnclaveError::Rejected(format!("client {id}: {e}")))?;
            if payload_id != id || registry.contains_key(&id) {
                return Err(EnclaveError::Rejected(format!(
                    "bad registration from client {id}"
                )));
            }
            registry.insert(id, (pk, client_keys[&id].to_bytes()));
        }
        if registry.is_empty() {
            return Err(EnclaveError::Rejected("no clients registered".into()));
        }
        let envelopes: Vec<SignedEnvelope> = registry
            .keys()
            .map(|&recipient| {
                let peers = registry
                    .iter()
                    .filter(|(id, _)| **id != recipient)
                    .map(|(id, (pk, _))| (*id, pk.clone()))
                    .collect();
                let payload = KeySetupPayload {
                    ctr: 0,
                    recipient,
                    peers,
                };
                self.sign(RecordKind::KeySetup, payload.to_bytes())
            })
            .collect();
        let inputs = digest_all(registrations.iter().map(|e| e.payload.as_slice()));
        let outputs = digest_all(envelopes.iter().map(|e| e.payload.as_slice()));
        let signature = envelopes.first().map(|e| e.signature).unwrap_or([0; 64]);
        self.state.log.push(StateEntry {
            ctr: 0,
            inputs_digest: inputs,
            outputs_digest: outputs,
            signature,
            rnd: [0; 32],
        });
        self.state.registry = registry;
        Ok(envelopes)
    }

    /// Aggregates round `ctr` (nothing when `ctr == 0`), selects round
    /// `ctr + 1`, and signs both. Any bad signature rejects the whole call
    /// without touching the state.
    pub fn attested_round(
        &mut self,
        ctr: u64,
        contributions: &[SignedEnvelope],
        recoveries: &[SignedEnvelope],
    ) -> Result<SignedEnvelope, EnclaveError> {
        let program = self
            .state
            .program
            .clone()
            .ok_or(EnclaveError::NotInstalled)?;
        if self.state.registry.is_empty() {
            return Err(EnclaveError::NotSetUp);
        }
        if ctr != self.state.ctr {
            return Err(EnclaveError::Replay {
                expected: self.state.ctr,
                got: ctr,
            });
        }
        let keys: BTreeMap<u64, VerifyingKey> = self
            .state
            .registry
            .iter()
            .map(|(id, (_, vk))| {
                let vk = VerifyingKey::from_bytes(vk).expect("registered key was valid");
                (*id, vk)
            })
            .collect();

        let mut updates = Vec::with_capacity(contributions.len());
        for env in contributions {
            let id = verify_client_envelope(env, RecordKind::Update, &keys)?;
            let u = MaskedUpdate::from_wire(&env.payload)
                .map_err(|e| EnclaveError::Rejected(format!("update from client {id}: {e}")))?;
            if u.client_id != id {
                return Err(EnclaveError::Rejected(format!(
                    "client {id} signed an update for {}",
                    u.client_id
                )));
            }
            updates.push(u);
        }
        let mut qs = Vec::with_capacity(recoveries.len());
        for env in recoveries {
            let id = verify_client_envelope(env, RecordKind::Recovery, &keys)?;
            let q = RecoveryVector::from_wire(&env.payload)
                .map_err(|e| EnclaveError::Rejected(format!("recovery from client {id}: {e}")))?;
            if q.client_id != id {
                return Err(EnclaveError::Rejected(format!(
                    "client {id} signed a recovery for {}",
                    q.client_id
                )));
            }
            qs.push(q);
        }

        let (outcome, global_model) = match &self.state.current_plan {
            None => {
                if !updates.is_empty() || !qs.is_empty() {
                    return Err(EnclaveError::Protocol(ProtocolError::Protocol(
                        "no round is open yet".into(),
                    )));
                }
                (None, program.initial_model.clone())
            }
            Some(plan) => {
                if let Some(u) = updates.iter().find(|u| u.round != plan.round) {
                    return Err(EnclaveError::Replay {
                        expected: plan.round,
                        got: u.round,
                    });
                }
                let outcome = server_round(plan, &updates, &qs)?;
                let model = outcome.global_model.clone();
                (Some(outcome), model)
            }
        };

        let next_round = ctr + 1;
        let clients: Vec<u64> = self.state.registry.keys().copied().collect();
        let rnd = program.round_seed(next_round);
        let next_plan = program.plan_round(&clients, next_round, global_model)?;
        let payload = RoundPayload {
            ctr: next_round,
            rnd,
            next_plan: next_plan.clone(),
            outcome,
        };
        let envelope = self.sign(RecordKind::Round, payload.to_bytes());
        let inputs = digest_all(
            contributions
                .iter()
                .chain(recoveries)
                .map(|e| e.payload.as_slice()),
        );
        self.state.log.push(StateEntry {
            ctr: next_round,
            inputs_digest: inputs,
            outputs_digest: digest_all([envelope.payload.as_slice()]),
            signature: envelope.signature,
            rnd,
        });
        self.state.ctr = next_round;
        self.state.current_plan = Some(next_plan);
        Ok(envelope)
    }
}

/// Checks kind, signer and signature of a client-signed envelope and returns
/// the signer's id.
fn verify_client_envelope(
    env: &SignedEnvelope,
    kind: RecordKind,
    keys: &BTreeMap<u64, VerifyingKey>,
) -> Result<u64, EnclaveError> {
    let Signer::Client(id) = env.signer else {
        return Err(EnclaveError::Rejected(format!(
            "{kind:?} record not signed by a client"
        )));
    };
    if env.kind != kind {
        return Err(EnclaveError::Rejected(format!(
            "expected a {kind:?} record from client {id}, got {:?}",
            env.kind
        )));
    }
    let vk = keys
        .get(&id)
        .ok_or_else(|| EnclaveError::Rejected(format!("unknown client {id}")))?;
    if !env.verify(vk) {
        return Err(EnclaveError::Rejected(format!(
            "bad signature from client {id}"
        )));
    }
    Ok(id)
}

/// Client-side check of a key-setup envelope: signature under `vk_T`,
/// `ctr = 0`, and addressed to `me`.
pub fn verify_key_setup(
    env: &SignedEnvelope,
    enclave_key: &VerifyingKey,
    me: u64,
) -> Result<KeySetupPayload, EnclaveError> {
    if env.kind != RecordKind::KeySetup || env.signer != Signer::Enclave || !env.verify(enclave_key)
    {
        return Err(EnclaveError::Rejected(
            "key setup envelope does not verify".into(),
        ));
    }
    let payload = KeySetupPayload::from_bytes(&env.payload)?;
    if payload.ctr != 0 || payload.recipient != me {
        return Err(EnclaveError::Rejected(format!(
            "key setup for client {} at ctr {}",
            payload.recipient, payload.ctr
        )));
    }
    Ok(payload)
}

/// Tracks the last accepted round counter on the receiving side.
#[derive(Debug, Clone)]
pub struct RoundVerifier {
    enclave_key: VerifyingKey,
    last_ctr: u64,
}

impl RoundVerifier {
    pub fn new(enclave_key: VerifyingKey) -> Self {
        Self {
            enclave_key,
            last_ctr: 0,
        }
    }

    /// Accepts only a correctly signed round envelope with the next counter.
    pub fn accept(&mut self, env: &SignedEnvelope) -> Result<RoundPayload, EnclaveError> {
        if env.kind != RecordKind::Round
            || env.signer != Signer::Enclave
            || !env.verify(&self.enclave_key)
        {
            return Err(EnclaveError::Rejected(
                "round envelope does not verify".into(),
            ));
        }
        let payload = RoundPayload::from_bytes(&env.payload)?;
        if payload.ctr != self.last_ctr + 1 {
            return Err(EnclaveError::Replay {
                expected: self.last_ctr + 1,
                got: payload.ctr,
            });
        }
        self.last_ctr = payload.ctr;
        Ok(payload)
    }
}

/// Signs `kind || payload` with a client key.
pub fn client_sign(
    key: &SigningKey,
    client_id: u64,
    kind: RecordKind,
    payload: Vec<u8>,
) -> SignedEnvelope {
    let signature: Signature = key.sign(&transcript::signed_message(kind, &payload));
    SignedEnvelope {
        kind,
        signer: Signer::Client(client_id),
        payload,
        signature: signature.to_bytes(),
    }
}
