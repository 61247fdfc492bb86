//! Client and server sides of a secure aggregation round: selection and
//! grouping, local updates, masking, per-group aggregation with dropout
//! recovery, and the global model update.

mod client;
mod registry;
mod server;
pub mod workload;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::group::GroupError;
use crate::masking::{MaskError, MaskParams};
use crate::quantizer::{QuantConfig, QuantError};

pub use client::{client_recovery, client_update, ClientState};
pub use registry::ClientPool;
pub use server::{group_aggregate, server_round, RoundMetrics, RoundOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// How model values enter the message space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full local models scaled by `L` and floored into `Z_{2^32}`.
    Scaling,
    /// Clipped model differences through the 8-bit quantizer, in `Z_{2^8}`.
    Quant8,
    /// As `Quant8` with 16 bits.
    Quant16,
}

impl Mode {
    pub fn modulus_bits(self) -> u8 {
        match self {
            Mode::Scaling => 32,
            Mode::Quant8 => 8,
            Mode::Quant16 => 16,
        }
    }

    pub fn quant_bits(self) -> Option<u8> {
        match self {
            Mode::Scaling => None,
            Mode::Quant8 => Some(8),
            Mode::Quant16 => Some(16),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Mode::Scaling => 0,
            Mode::Quant8 => 1,
            Mode::Quant16 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            0 => Ok(Mode::Scaling),
            1 => Ok(Mode::Quant8),
            2 => Ok(Mode::Quant16),
            other => Err(CodecError::Invalid(format!("mode tag {other}"))),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scaling" => Ok(Mode::Scaling),
            "quant8" => Ok(Mode::Quant8),
            "quant16" => Ok(Mode::Quant16),
            other => Err(format!(
                "unknown mode {other:?} (expected scaling, quant8 or quant16)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: u64,
    pub selected: Vec<u64>,
    pub groups: Vec<Vec<u64>>,
    pub global_model: Vec<f64>,
    pub mode: Mode,
    /// Scaling factor `L`.
    pub scale: f64,
    /// Clip threshold `B`.
    pub clip_bound: f64,
}

/// Selection knobs that stay fixed across rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub fraction: f64,
    /// `None` puts every selected client in one group.
    pub group_size: Option<usize>,
}

/// Number of clients picked for a fraction of `total`: `ceil(fraction * total)`,
/// at least one.
pub fn selection_count(fraction: f64, total: usize) -> usize {
    // Absorb float noise such as 0.1 * 100 = 10.000000000000002.
    let raw = (fraction * total as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total)
}

/// 32-byte seed for round `round` derived from a run seed and a purpose label.
pub fn derive_seed(run_seed: &[u8], label: &str, round: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label.len() as u64).to_be_bytes());
    h.update(label.as_bytes());
    h.update(round.to_be_bytes());
    h.update(run_seed);
    h.finalize().into()
}

/// Picks `ceil(fraction * S)` clients uniformly from `seed` and splits the
/// sorted selection into contiguous groups.
pub fn select_round(
    all_clients: &[u64],
    policy: SelectionPolicy,
    round: u64,
    seed: &[u8; 32],
) -> Result<(Vec<u64>, Vec<Vec<u64>>), ProtocolError> {
    if all_clients.is_empty() {
        return Err(ProtocolError::Usage("no registered clients".into()));
    }
    if !(policy.fraction > 0.0 && policy.fraction <= 1.0) {
        return Err(ProtocolError::Usage(format!(
            "selection fraction {} outside (0, 1]",
            policy.fraction
        )));
    }
    if policy.group_size == Some(0) {
        return Err(ProtocolError::Usage("group size must be at least 1".into()));
    }
    if round == 0 {
        return Err(ProtocolError::Usage("rounds start at 1".into()));
    }
    let mut pool = all_clients.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let k = selection_count(policy.fraction, pool.len());
    let mut rng = ChaCha20Rng::from_seed(*seed);
    let mut selected: Vec<u64> = index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    selected.sort_unstable();
    let groups = make_groups(&selected, policy.group_size);
    Ok((selected, groups))
}

pub fn make_groups(selected: &[u64], group_size: Option<usize>) -> Vec<Vec<u64>> {
    let size = group_size.unwrap_or(selected.len()).max(1);
    selected.chunks(size).map(<[u64]>::to_vec).collect()
}

impl RoundPlan {
    /// Checks that the groups partition the selected set and that the mode
    /// parameters are usable.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.round == 0 {
            return Err(ProtocolError::Usage("rounds start at 1".into()));
        }
        if self.selected.is_empty() || self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProtocolError::Usage(
                "selected set must be nonempty and strictly increasing".into(),
            ));
        }
        if self.global_model.is_empty() {
            return Err(ProtocolError::Usage(
                "model dimension must be at least 1".into(),
            ));
        }
        let mut flat: Vec<u64> = self.groups.iter().flatten().copied().collect();
        flat.sort_unstable();
        if self.groups.iter().any(Vec::is_empty) || flat != self.selected {
            return Err(ProtocolError::Usage(
                "groups must partition the selected set".into(),
            ));
        }
        if self.mode.quant_bits().is_some() {
            QuantConfig::with_scale(8, self.clip_bound, 1, self.scale)?;
        } else if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(QuantError::Scale(self.scale).into());
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.global_model.len()
    }

    pub fn group_of(&self, client: u64) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.binary_search(&client).is_ok())
    }

    /// Masking parameters for group `index`.
    pub fn group_params(&self, index: usize) -> Result<MaskParams, ProtocolError> {
        let group = self
            .groups
            .get(index)
            .ok_or_else(|| ProtocolError::Usage(format!("no group {index}")))?;
        Ok(MaskParams::new(
            self.mode.modulus_bits(),
            self.round,
            group.clone(),
            self.dim(),
        )?)
    }

    /// Quantizer for group `index`: range scaled by that group's size.
    pub fn group_quantizer(&self, index: usize) -> Result<Option<QuantConfig>, ProtocolError> {
        let Some(bits) = self.mode.quant_bits() else {
            return Ok(None);
        };
        let size = self
            .groups
            .get(index)
            .ok_or_else(|| ProtocolError::Usage(format!("no group {index}")))?
            .len();
        Ok(Some(QuantConfig::with_scale(
            bits,
            self.clip_bound,
            size as u32,
            self.scale,
        )?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.round)
            .u64_list(&self.selected)
            .u64(self.groups.len() as u64);
        for g in &self.groups {
            w.u64_list(g);
        }
        w.f64_list(&self.global_model)
            .u8(self.mode.tag())
            .f64(self.scale)
            .f64(self.clip_bound);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let plan = Self::read(&mut r)?;
        r.finish()?;
        Ok(plan)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, ProtocolError> {
        let round = r.u64()?;
        let selected = r.u64_list()?;
        let n_groups = r.u64()?;
        if n_groups > selected.len() as u64 {
            return Err(CodecError::Invalid("more groups than selected clients".into()).into());
        }
        let groups = (0..n_groups)
            .map(|_| r.u64_list())
            .collect::<Result<_, _>>()?;
        let global_model = r.f64_list()?;
        let mode = Mode::from_tag(r.u8()?)?;
        let scale = r.f64()?;
        let clip_bound = r.f64()?;
        Ok(Self {
            round,
            selected,
            groups,
            global_model,
            mode,
            scale,
            clip_bound,
        })
    }
}
