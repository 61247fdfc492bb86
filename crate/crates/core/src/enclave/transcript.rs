//! Signed records and the JSON-lines transcript built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signature, VerifyingKey};
use serde::{Deserialize, Serialize};

use crate::codec::{from_hex, to_hex};
use crate::masking::{MaskedUpdate, RecoveryVector};

use super::{parse_client_key_payload, KeySetupPayload, RoundPayload};

const SIGNING_CONTEXT: &[u8] = b"secagg-record/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Install,
    ClientKey,
    KeySetup,
    Round,
    Update,
    Recovery,
}

impl RecordKind {
    fn tag(self) -> u8 {
        match self {
            RecordKind::Install => 1,
            RecordKind::ClientKey => 2,
            RecordKind::KeySetup => 3,
            RecordKind::Round => 4,
            RecordKind::Update => 5,
            RecordKind::Recovery => 6,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RecordKind::Install => "install",
            RecordKind::ClientKey => "client-key",
            RecordKind::KeySetup => "key-setup",
            RecordKind::Round => "round",
            RecordKind::Update => "update",
            RecordKind::Recovery => "recovery",
        }
    }

    fn enclave_signed(self) -> bool {
        matches!(
            self,
            RecordKind::Install | RecordKind::KeySetup | RecordKind::Round
        )
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            RecordKind::Install,
            RecordKind::ClientKey,
            RecordKind::KeySetup,
            RecordKind::Round,
            RecordKind::Update,
            RecordKind::Recovery,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown record kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signer {
    Enclave,
    Client(u64),
}

impl fmt::Display for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signer::Enclave => f.write_str("enclave"),
            Signer::Client(id) => write!(f, "client-{id}"),
        }
    }
}

impl FromStr for Signer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "enclave" {
            return Ok(Signer::Enclave);
        }
        s.strip_prefix("client-")
            .and_then(|id| id.parse().ok())
            .map(Signer::Client)
            .ok_or_else(|| format!("unknown signer {s:?}"))
    }
}

pub(super) fn signed_message(kind: RecordKind, payload: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(SIGNING_CONTEXT.len() + 1 + payload.len());
    msg.extend_from_slice(SIGNING_CONTEXT);
    msg.push(kind.tag());
    msg.extend_from_slice(payload);
    msg
}

/// A payload together with who signed it and the signature over
/// `kind || payload`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub kind: RecordKind,
    pub signer: Signer,
    pub payload: Vec<u8>,
    pub signature: [u8; 64],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    kind: String,
    signer: String,
    payload: String,
    signature: String,
}

impl SignedEnvelope {
    pub fn verify(&self, key: &VerifyingKey) -> bool {
        let sig = Signature::from_bytes(&self.signature);
        key.verify_strict(&signed_message(self.kind, &self.payload), &sig)
            .is_ok()
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&Line {
            kind: self.kind.name().to_string(),
            signer: self.signer.to_string(),
            payload: to_hex(&self.payload),
            signature: to_hex(&self.signature),
        })
        .expect("string fields always serialize")
    }

    /// Parses one line; it must be byte-identical to its own re-encoding.
    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let raw: Line = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
        let signature: [u8; 64] = from_hex(&raw.signature)
            .map_err(|e| e.to_string())?
            .try_into()
            .map_err(|_| "signature must be 64 bytes".to_string())?;
        let env = SignedEnvelope {
            kind: raw.kind.parse()?,
            signer: raw.signer.parse()?,
            payload: from_hex(&raw.payload).map_err(|e| e.to_string())?,
            signature,
        };
        if env.to_json_line() != line {
            return Err("record is not in canonical form".into());
        }
        Ok(env)
    }
}

/// Ordered log of every signed message exchanged during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<SignedEnvelope>,
}

impl Transcript {
    pub fn push(&mut self, env: SignedEnvelope) {
        self.records.push(env);
    }

    pub fn extend(&mut self, envs: impl IntoIterator<Item = SignedEnvelope>) {
        self.records.extend(envs);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One record per line, each terminated by `\n`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    /// Records checked successfully before stopping.
    pub verified: usize,
    /// Zero-based index of the first rejected record and the reason.
    pub failure: Option<(usize, String)>,
}

impl VerifyReport {
    pub fn accepted(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Default)]
struct Replay {
    installed: bool,
    keyed: BTreeSet<u64>,
    last_round: Option<u64>,
    selected: BTreeSet<u64>,
}

impl Replay {
    fn check(
        &mut self,
        env: &SignedEnvelope,
        enclave_key: &VerifyingKey,
        client_keys: &BTreeMap<u64, VerifyingKey>,
    ) -> Result<(), String> {
        let key = match (env.signer, env.kind.enclave_signed()) {
            (Signer::Enclave, true) => enclave_key,
            (Signer::Client(id), false) => client_keys
                .get(&id)
                .ok_or_else(|| format!("unknown client {id}"))?,
            (signer, _) => return Err(format!("{} record signed by {signer}", env.kind.name())),
        };
        if !env.verify(key) {
            return Err("signature does not verify".into());
        }
        if env.kind != RecordKind::Install && !self.installed {
            return Err("record precedes program install".into());
        }
        let client = match env.signer {
            Signer::Client(id) => id,
            Signer::Enclave => 0,
        };
        match env.kind {
            RecordKind::Install => {
                if env.payload.len() != 32 {
                    return Err("install token must carry a 32-byte program hash".into());
                }
                *self = Replay {
                    installed: true,
                    ..Replay::default()
                };
            }
            RecordKind::ClientKey => {
                let (id, _) = parse_client_key_payload(&env.payload).map_err(|e| e.to_string())?;
                if id != client {
                    return Err(format!("client {client} registered a key for {id}"));
                }
                if self.last_round.is_some() {
                    return Err("key registration after key setup".into());
                }
            }
            RecordKind::KeySetup => {
                let p = KeySetupPayload::from_bytes(&env.payload).map_err(|e| e.to_string())?;
                if p.ctr != 0 {
                    return Err(format!("key setup at ctr {}", p.ctr));
                }
                if !self.keyed.insert(p.recipient) {
                    return Err(format!("second key setup for client {}", p.recipient));
                }
                if self.last_round.is_some_and(|r| r > 0) {
                    return Err("key setup after rounds started".into());
                }
                self.last_round = Some(0);
            }
            RecordKind::Round => {
                let p = RoundPayload::from_bytes(&env.payload).map_err(|e| e.to_string())?;
                let expected = self.last_round.ok_or("round before key setup")? + 1;
                if p.ctr != expected {
                    return Err(format!(
                        "round counter {} where {expected} was expected",
                        p.ctr
                    ));
                }
                if p.next_plan.round != p.ctr {
                    return Err("plan round does not match counter".into());
                }
                if let Some(o) = &p.outcome {
                    if o.round + 1 != p.ctr {
                        return Err(format!("outcome for round {} at ctr {}", o.round, p.ctr));
                    }
                } else if p.ctr != 1 {
                    return Err("round envelope without an outcome".into());
                }
                self.last_round = Some(p.ctr);
                self.selected = p.next_plan.selected.iter().copied().collect();
            }
            RecordKind::Update | RecordKind::Recovery => {
                let (id, round) = if env.kind == RecordKind::Update {
                    let u = MaskedUpdate::from_wire(&env.payload).map_err(|e| e.to_string())?;
                    (u.client_id, u.round)
                } else {
                    let q = RecoveryVector::from_wire(&env.payload).map_err(|e| e.to_string())?;
                    (q.client_id, q.round)
                };
                if id != client {
                    return Err(format!("client {client} signed a message for {id}"));
                }
                let open = self
                    .last_round
                    .filter(|&r| r > 0)
                    .ok_or("no round is open")?;
                if round != open {
                    return Err(format!(
                        "message for round {round} while round {open} is open"
                    ));
                }
                if !self.selected.contains(&id) {
                    return Err(format!("client {id} is not selected in round {open}"));
                }
            }
        }
        Ok(())
    }
}

/// Checks every line of a JSON-lines transcript in order: canonical form,
/// signature under the enclave or the named client's key, and counter
/// monotonicity. Stops at the first bad record.
pub fn verify_transcript(
    text: &[u8],
    enclave_key: &VerifyingKey,
    client_keys: &BTreeMap<u64, VerifyingKey>,
) -> VerifyReport {
    let text = match std::str::from_utf8(text) {
        Ok(t) => t,
        Err(e) => {
            // Lines before the invalid byte are still checked.
            let valid = std::str::from_utf8(&text[..e.valid_up_to()]).expect("valid prefix");
            let bad_line = valid.matches('\n').count();
            let mut report = verify_lines(valid, enclave_key, client_keys, Some(bad_line));
            if report.failure.is_none() {
                report.failure = Some((bad_line, "record is not valid UTF-8".into()));
            }
            return report;
        }
    };
    verify_lines(text, enclave_key, client_keys, None)
}

fn verify_lines(
    text: &str,
    enclave_key: &VerifyingKey,
    client_keys: &BTreeMap<u64, VerifyingKey>,
    stop_at: Option<usize>,
) -> VerifyReport {
    let mut lines: Vec<&str> = text.split('\n').collect();
    let complete = stop_at.is_none();
    if complete {
        if lines.last() == Some(&"") {
            lines.pop();
        } else if !text.is_empty() {
            let last = lines.len() - 1;
            return check_all(&lines[..last], enclave_key, client_keys).unwrap_or_else(|| {
                VerifyReport {
                    verified: last,
                    failure: Some((last, "missing trailing newline".into())),
                }
            });
        }
    }
    let limit = stop_at.unwrap_or(lines.len()).min(lines.len());
    if complete && limit == 0 {
        return VerifyReport {
            verified: 0,
            failure: Some((0, "empty transcript".into())),
        };
    }
    check_all(&lines[..limit], enclave_key, client_keys).unwrap_or(VerifyReport {
        verified: limit,
        failure: None,
    })
}

/// `Some(report)` on the first failure, `None` if every line passes.
fn check_all(
    lines: &[&str],
    enclave_key: &VerifyingKey,
    client_keys: &BTreeMap<u64, VerifyingKey>,
) -> Option<VerifyReport> {
    let mut replay = Replay::default();
    for (i, line) in lines.iter().enumerate() {
        let result = SignedEnvelope::from_json_line(line)
            .and_then(|env| replay.check(&env, enclave_key, client_keys));
        if let Err(reason) = result {
            return Some(VerifyReport {
                verified: i,
                failure: Some((i, reason)),
            });
        }
    }
    None
}
