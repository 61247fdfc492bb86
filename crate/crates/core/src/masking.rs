//! Pairwise blinding factors, masked updates in `Z_M`, aggregation and
//! dropout recovery.
//!
//! `M` is always a power of two (`2^modulus_bits`), so reducing a hash
//! mod `M` is a truncation to its low bits and carries no modulo bias.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::group::{KeyMaterial, SharedKey};

/// Leading byte of every blinding-factor hash input.
pub const BLIND_TAG: u8 = 0x02;

pub const SUPPORTED_MODULUS_BITS: [u8; 4] = [8, 16, 32, 64];

/// Size of the `MaskedUpdate` wire header: client id, round, modulus bits, m.
pub const UPDATE_HEADER_LEN: usize = 8 + 8 + 1 + 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("unsupported modulus width {0} bits")]
    ModulusBits(u8),
    #[error("round counter must be at least 1")]
    ZeroRound,
    #[error("selected set must be nonempty and strictly increasing")]
    Selection,
    #[error("model dimension must be at least 1")]
    ZeroDimension,
    #[error("client {0} is not in the selected set")]
    NotSelected(u64),
    #[error("a client cannot blind against itself (id {0})")]
    SelfPeer(u64),
    #[error("client {client} has no shared key for peer {peer}")]
    MissingKey { client: u64, peer: u64 },
    #[error("expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("element {index} = {value} is outside [0, 2^{bits})")]
    OutOfRange { index: usize, value: u64, bits: u8 },
    #[error("nothing to aggregate")]
    Empty,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Counts hash invocations and modular additions for complexity accounting.
#[derive(Debug, Default)]
pub struct OpCounter {
    hashes: AtomicU64,
    additions: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hashes(&self) -> u64 {
        self.hashes.load(Ordering::Relaxed)
    }

    pub fn additions(&self) -> u64 {
        self.additions.load(Ordering::Relaxed)
    }

    fn add_hashes(&self, n: u64) {
        self.hashes.fetch_add(n, Ordering::Relaxed);
    }

    fn add_additions(&self, n: u64) {
        self.additions.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskParams {
    modulus_bits: u8,
    round: u64,
    selected: Vec<u64>,
    dim: usize,
}

impl MaskParams {
    pub fn new(
        modulus_bits: u8,
        round: u64,
        selected: Vec<u64>,
        dim: usize,
    ) -> Result<Self, MaskError> {
        if !SUPPORTED_MODULUS_BITS.contains(&modulus_bits) {
            return Err(MaskError::ModulusBits(modulus_bits));
        }
        if round == 0 {
            return Err(MaskError::ZeroRound);
        }
        if selected.is_empty() || selected.windows(2).any(|w| w[0] >= w[1]) || selected[0] == 0 {
            return Err(MaskError::Selection);
        }
        if dim == 0 {
            return Err(MaskError::ZeroDimension);
        }
        Ok(Self {
            modulus_bits,
            round,
            selected,
            dim,
        })
    }

    pub fn modulus_bits(&self) -> u8 {
        self.modulus_bits
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn selected(&self) -> &[u64] {
        &self.selected
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `M - 1`, the mask that reduces a `u64` into `[0, M)`.
    pub fn mask(&self) -> u64 {
        modulus_mask(self.modulus_bits)
    }

    fn is_selected(&self, id: u64) -> bool {
        self.selected.binary_search(&id).is_ok()
    }
}

pub fn modulus_mask(bits: u8) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// `(-1)^{self > peer} * H(ck || b || t) mod M`.
pub fn blind_factor(
    ck: &SharedKey,
    self_id: u64,
    peer_id: u64,
    index: u64,
    params: &MaskParams,
) -> Result<u64, MaskError> {
    if self_id == peer_id {
        return Err(MaskError::SelfPeer(self_id));
    }
    Ok(signed_factor(
        ck,
        self_id,
        peer_id,
        index,
        params.round,
        params.mask(),
    ))
}

fn prf(ck: &SharedKey, index: u64, round: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([BLIND_TAG]);
    h.update(ck.as_bytes());
    h.update(index.to_be_bytes());
    h.update(round.to_be_bytes());
    h.finalize().into()
}

fn signed_factor(
    ck: &SharedKey,
    self_id: u64,
    peer_id: u64,
    index: u64,
    round: u64,
    mask: u64,
) -> u64 {
    let digest = prf(ck, index, round);
    let low = u64::from_be_bytes(digest[24..].try_into().expect("8 bytes")) & mask;
    if self_id > peer_id {
        low.wrapping_neg() & mask
    } else {
        low
    }
}

/// Sum over `peers` of the signed blinding factors for every coordinate.
fn blinding_vector(
    keys: &KeyMaterial,
    peers: &[u64],
    params: &MaskParams,
    ops: &OpCounter,
) -> Result<Vec<u64>, MaskError> {
    let me = keys.client_id();
    let mask = params.mask();
    let mut out = vec![0u64; params.dim];
    for &peer in peers {
        let ck = keys
            .shared_key(peer)
            .ok_or(MaskError::MissingKey { client: me, peer })?;
        for (b, slot) in out.iter_mut().enumerate() {
            let f = signed_factor(ck, me, peer, b as u64, params.round, mask);
            *slot = slot.wrapping_add(f) & mask;
        }
        ops.add_hashes(params.dim as u64);
    }
    Ok(out)
}

/// The full mask `r_k` of a client against every other selected client.
pub fn mask_vector(
    keys: &KeyMaterial,
    params: &MaskParams,
    ops: &OpCounter,
) -> Result<Vec<u64>, MaskError> {
    let me = keys.client_id();
    if !params.is_selected(me) {
        return Err(MaskError::NotSelected(me));
    }
    let peers: Vec<u64> = params
        .selected
        .iter()
        .copied()
        .filter(|&n| n != me)
        .collect();
    blinding_vector(keys, &peers, params, ops)
}

fn check_plain(plain: &[u64], params: &MaskParams) -> Result<(), MaskError> {
    if plain.len() != params.dim {
        return Err(MaskError::Shape {
            expected: params.dim,
            got: plain.len(),
        });
    }
    let mask = params.mask();
    if let Some((index, &value)) = plain.iter().enumerate().find(|(_, &v)| v & !mask != 0) {
        return Err(MaskError::OutOfRange {
            index,
            value,
            bits: params.modulus_bits,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub client_id: u64,
    pub round: u64,
    pub modulus_bits: u8,
    pub values: Vec<u64>,
}

pub fn mask_update(
    plain: &[u64],
    keys: &KeyMaterial,
    params: &MaskParams,
) -> Result<MaskedUpdate, MaskError> {
    mask_update_counted(plain, keys, params, &OpCounter::new())
}

/// `w'_k = w_k + r_k mod M`, counting one hash per (peer, coordinate).
pub fn mask_update_counted(
    plain: &[u64],
    keys: &KeyMaterial,
    params: &MaskParams,
    ops: &OpCounter,
) -> Result<MaskedUpdate, MaskError> {
    check_plain(plain, params)?;
    let r = mask_vector(keys, params, ops)?;
    let mask = params.mask();
    let values = plain
        .iter()
        .zip(&r)
        .map(|(&w, &r)| w.wrapping_add(r) & mask)
        .collect();
    Ok(MaskedUpdate {
        client_id: keys.client_id(),
        round: params.round,
        modulus_bits: params.modulus_bits,
        values,
    })
}

/// Inverse of [`mask_update`] for the same key material.
pub fn unmask(
    update: &MaskedUpdate,
    keys: &KeyMaterial,
    params: &MaskParams,
) -> Result<Vec<u64>, MaskError> {
    check_plain(&update.values, params)?;
    let r = mask_vector(keys, params, &OpCounter::new())?;
    let mask = params.mask();
    Ok(update
        .values
        .iter()
        .zip(&r)
        .map(|(&w, &r)| w.wrapping_sub(r) & mask)
        .collect())
}

/// Elementwise sum of masked updates mod `M`. Counts `m` additions per update.
pub fn aggregate(
    masked: &[MaskedUpdate],
    params: &MaskParams,
    ops: &OpCounter,
) -> Result<Vec<u64>, MaskError> {
    if masked.is_empty() {
        return Err(MaskError::Empty);
    }
    let mask = params.mask();
    let mut seen = BTreeSet::new();
    let mut acc = vec![0u64; params.dim];
    for u in masked {
        if u.round != params.round {
            return Err(MaskError::Protocol(format!(
                "update from client {} is for round {}, expected {}",
                u.client_id, u.round, params.round
            )));
        }
        if u.modulus_bits != params.modulus_bits {
            return Err(MaskError::Protocol(format!(
                "update from client {} uses a 2^{} modulus, expected 2^{}",
                u.client_id, u.modulus_bits, params.modulus_bits
            )));
        }
        if !params.is_selected(u.client_id) {
            return Err(MaskError::NotSelected(u.client_id));
        }
        if !seen.insert(u.client_id) {
            return Err(MaskError::Protocol(format!(
                "duplicate update from client {}",
                u.client_id
            )));
        }
        check_plain(&u.values, params)?;
        for (a, &v) in acc.iter_mut().zip(&u.values) {
            *a = a.wrapping_add(v) & mask;
        }
        ops.add_additions(params.dim as u64);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryVector {
    pub client_id: u64,
    pub round: u64,
    pub modulus_bits: u8,
    pub dropout_set: Vec<u64>,
    pub values: Vec<u64>,
}

pub fn recovery_vector(
    keys: &KeyMaterial,
    dropout_set: &[u64],
    params: &MaskParams,
) -> Result<RecoveryVector, MaskError> {
    recovery_vector_counted(keys, dropout_set, params, &OpCounter::new())
}

/// `q_k(b) = sum over n in T_d of (-1)^{k>n} H(CK_{k,n} || b || t) mod M`.
pub fn recovery_vector_counted(
    keys: &KeyMaterial,
    dropout_set: &[u64],
    params: &MaskParams,
    ops: &OpCounter,
) -> Result<RecoveryVector, MaskError> {
    let me = keys.client_id();
    if dropout_set.is_empty() {
        return Err(MaskError::Protocol(
            "empty dropout set: no recovery needed".into(),
        ));
    }
    if !params.is_selected(me) {
        return Err(MaskError::NotSelected(me));
    }
    let dropouts = canonical_dropouts(dropout_set, params)?;
    if dropouts.contains(&me) {
        return Err(MaskError::Protocol(format!(
            "client {me} is listed as a dropout"
        )));
    }
    let values = blinding_vector(keys, &dropouts, params, ops)?;
    Ok(RecoveryVector {
        client_id: me,
        round: params.round,
        modulus_bits: params.modulus_bits,
        dropout_set: dropouts,
        values,
    })
}

fn canonical_dropouts(dropout_set: &[u64], params: &MaskParams) -> Result<Vec<u64>, MaskError> {
    let set: BTreeSet<u64> = dropout_set.iter().copied().collect();
    if set.len() != dropout_set.len() {
        return Err(MaskError::Protocol("duplicate ids in dropout set".into()));
    }
    if let Some(&id) = set.iter().find(|&&id| !params.is_selected(id)) {
        return Err(MaskError::NotSelected(id));
    }
    Ok(set.into_iter().collect())
}

/// Subtracts every online client's recovery vector from the partial sum.
///
/// The online set is `selected \ dropout_set` and must be covered by exactly
/// one recovery vector each.
pub fn apply_recovery(
    partial_sum: &[u64],
    recoveries: &[RecoveryVector],
    params: &MaskParams,
) -> Result<Vec<u64>, MaskError> {
    if partial_sum.len() != params.dim {
        return Err(MaskError::Shape {
            expected: params.dim,
            got: partial_sum.len(),
        });
    }
    let Some(first) = recoveries.first() else {
        return Err(MaskError::Protocol("no recovery vectors supplied".into()));
    };
    let dropouts = canonical_dropouts(&first.dropout_set, params)?;
    let online: BTreeSet<u64> = params
        .selected
        .iter()
        .copied()
        .filter(|id| dropouts.binary_search(id).is_err())
        .collect();
    let mut seen = BTreeSet::new();
    let mask = params.mask();
    let mut out = partial_sum.to_vec();
    for q in recoveries {
        if q.dropout_set != dropouts {
            return Err(MaskError::Protocol(format!(
                "client {} answered for a different dropout set",
                q.client_id
            )));
        }
        if q.round != params.round || q.modulus_bits != params.modulus_bits {
            return Err(MaskError::Protocol(format!(
                "recovery vector from client {} has mismatched round or modulus",
                q.client_id
            )));
        }
        if !online.contains(&q.client_id) {
            return Err(MaskError::Protocol(format!(
                "client {} is not an online contributor",
                q.client_id
            )));
        }
        if !seen.insert(q.client_id) {
            return Err(MaskError::Protocol(format!(
                "duplicate recovery vector from client {}",
                q.client_id
            )));
        }
        check_plain(&q.values, params)?;
        for (o, &v) in out.iter_mut().zip(&q.values) {
            *o = o.wrapping_sub(v) & mask;
        }
    }
    if seen.len() != online.len() {
        let missing: Vec<u64> = online.difference(&seen).copied().collect();
        return Err(MaskError::Protocol(format!(
            "missing recovery vectors from {missing:?}"
        )));
    }
    Ok(out)
}

/// Packs values big-endian at `bits / 8` bytes each.
pub fn pack(values: &[u64], bits: u8) -> Vec<u8> {
    let width = usize::from(bits / 8);
    let mut out = Vec::with_capacity(values.len() * width);
    for &v in values {
        out.extend_from_slice(&v.to_be_bytes()[8 - width..]);
    }
    out
}

pub fn unpack(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u64>, MaskError> {
    let width = usize::from(bits / 8);
    if bytes.len() != count * width {
        return Err(MaskError::Shape {
            expected: count * width,
            got: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| {
            let mut buf = [0u8; 8];
            buf[8 - width..].copy_from_slice(c);
            u64::from_be_bytes(buf)
        })
        .collect())
}

fn read_bits(r: &mut Reader<'_>) -> Result<u8, MaskError> {
    let bits = r.u8()?;
    if !SUPPORTED_MODULUS_BITS.contains(&bits) {
        return Err(MaskError::ModulusBits(bits));
    }
    Ok(bits)
}

impl MaskedUpdate {
    /// Bytes of packed values, excluding the header.
    pub fn payload_len(&self) -> usize {
        self.values.len() * usize::from(self.modulus_bits / 8)
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.client_id)
            .u64(self.round)
            .u8(self.modulus_bits)
            .u64(self.values.len() as u64)
            .raw(&pack(&self.values, self.modulus_bits));
        w.finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut r = Reader::new(bytes);
        let client_id = r.u64()?;
        let round = r.u64()?;
        let modulus_bits = read_bits(&mut r)?;
        let m = r.u64()? as usize;
        let width = usize::from(modulus_bits / 8);
        if r.remaining() != m.saturating_mul(width) {
            return Err(MaskError::Shape {
                expected: m.saturating_mul(width),
                got: r.remaining(),
            });
        }
        let values = unpack(r.take(m * width)?, modulus_bits, m)?;
        Ok(Self {
            client_id,
            round,
            modulus_bits,
            values,
        })
    }
}

impl RecoveryVector {
    pub fn to_wire(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.client_id)
            .u64(self.round)
            .u8(self.modulus_bits)
            .u64_list(&self.dropout_set)
            .u64(self.values.len() as u64)
            .raw(&pack(&self.values, self.modulus_bits));
        w.finish()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut r = Reader::new(bytes);
        let client_id = r.u64()?;
        let round = r.u64()?;
        let modulus_bits = read_bits(&mut r)?;
        let dropout_set = r.u64_list()?;
        let m = r.u64()? as usize;
        let width = usize::from(modulus_bits / 8);
        if r.remaining() != m.saturating_mul(width) {
            return Err(MaskError::Shape {
                expected: m.saturating_mul(width),
                got: r.remaining(),
            });
        }
        let values = unpack(r.take(m * width)?, modulus_bits, m)?;
        Ok(Self {
            client_id,
            round,
            modulus_bits,
            dropout_set,
            values,
        })
    }
}
