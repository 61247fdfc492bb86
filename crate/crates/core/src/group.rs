//! Prime-order group arithmetic, Diffie-Hellman key pairs and pairwise
//! shared-key derivation.
//!
//! The group is the order-`q` subgroup of quadratic residues in `Z_p^*` for a
//! safe prime `p = 2q + 1`. Elements are encoded as fixed-width big-endian
//! integers whose width is the byte length of `p`.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, CodecError};

/// Leading byte of every key-derivation hash input.
pub const KDF_TAG: u8 = 0x01;
const KEYGEN_TAG: u8 = 0x00;

/// Largest 61-bit safe prime with `p ≡ 7 (mod 8)`, so 2 is a quadratic residue.
pub const TEST_PRIME: u64 = 2_305_843_009_213_690_799;

/// 2048-bit MODP group from RFC 3526 (group 14).
const RFC3526_2048_HEX: &str = "ffffffffffffffffc90fdaa22168c234c4c6628b80dc1cd129024e088a67cc74020bbea63b139b22514a08798e3404ddef9519b3cd3a431b302b0a6df25f14374fe1356d6d51c245e485b576625e7ec6f44c42e9a637ed6b0bff5cb6f406b7edee386bfb5a899fa5ae9f24117c4b1fe649286651ece45b3dc2007cb8a163bf0598da48361c55d39a69163fa8fd24cf5f83655d23dca3ad961c62f356208552bb9ed529077096966d670c354e4abc9804f1746c08ca18217c32905e462e36ce3be39e772c180e86039b2783a2ec07a28fb5c55df06f4c52c9de2bcbf6955817183995497cea956ae515d2261898fa051015728e5a8aacaa68ffffffffffffffff";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("invalid group parameters: {0}")]
    Params(String),
    #[error("client ids start at 1")]
    ZeroClientId,
    #[error("key generation seed must be nonempty")]
    EmptySeed,
    #[error("client {0} cannot derive a shared key with itself")]
    SelfPeer(u64),
    #[error("public key of client {0} is not an element of the group")]
    InvalidElement(u64),
    #[error("malformed group element encoding: {0}")]
    Encoding(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupVariant {
    /// 61-bit safe prime, for tests and desk-scale simulation.
    Test,
    /// 2048-bit safe prime.
    Production,
}

#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    modulus: BigUint,
    order: BigUint,
    generator: BigUint,
    width: usize,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("bits", &self.modulus.bits())
            .field("generator", &self.generator)
            .finish()
    }
}

impl GroupParams {
    /// Validates `modulus` as a safe prime and `generator` as a generator of
    /// its prime-order subgroup.
    pub fn new(modulus: BigUint, generator: BigUint) -> Result<Self, GroupError> {
        let two = BigUint::from(2u8);
        if modulus < BigUint::from(7u8) || !is_probable_prime(&modulus) {
            return Err(GroupError::Params("modulus is not prime".into()));
        }
        let order = (&modulus - 1u8) >> 1;
        if !is_probable_prime(&order) {
            return Err(GroupError::Params(
                "modulus is not a safe prime ((p-1)/2 composite)".into(),
            ));
        }
        if generator < two || generator >= modulus {
            return Err(GroupError::Params("generator out of range".into()));
        }
        if !generator.modpow(&order, &modulus).is_one() {
            return Err(GroupError::Params(
                "generator does not lie in the prime-order subgroup".into(),
            ));
        }
        let width = modulus.bits().div_ceil(8) as usize;
        Ok(Self {
            modulus,
            order,
            generator,
            width,
        })
    }

    pub fn variant(variant: GroupVariant) -> Self {
        match variant {
            GroupVariant::Test => Self::test_grade(),
            GroupVariant::Production => Self::production_grade(),
        }
    }

    pub fn test_grade() -> Self {
        Self::new(BigUint::from(TEST_PRIME), BigUint::from(2u8)).expect("published test prime")
    }

    pub fn production_grade() -> Self {
        let p = BigUint::parse_bytes(RFC3526_2048_HEX.as_bytes(), 16).expect("valid hex");
        Self::new(p, BigUint::from(2u8)).expect("RFC 3526 group")
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// Prime order of the subgroup generated by `g`.
    pub fn order(&self) -> &BigUint {
        &self.order
    }

    pub fn generator(&self) -> &BigUint {
        &self.generator
    }

    /// Byte width of an encoded element.
    pub fn element_width(&self) -> usize {
        self.width
    }

    pub fn exp(&self, base: &GroupElement, exponent: &BigUint) -> GroupElement {
        GroupElement(base.0.modpow(exponent, &self.modulus))
    }

    pub fn exp_generator(&self, exponent: &BigUint) -> GroupElement {
        GroupElement(self.generator.modpow(exponent, &self.modulus))
    }

    pub fn contains(&self, e: &GroupElement) -> bool {
        !e.0.is_zero() && e.0 < self.modulus && e.0.modpow(&self.order, &self.modulus).is_one()
    }

    pub fn encode(&self, e: &GroupElement) -> Vec<u8> {
        let raw = e.0.to_bytes_be();
        let mut out = vec![0u8; self.width - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        if bytes.len() != self.width {
            return Err(GroupError::Encoding(format!(
                "expected {} bytes, got {}",
                self.width,
                bytes.len()
            )));
        }
        Ok(GroupElement(BigUint::from_bytes_be(bytes)))
    }
}

/// Miller-Rabin with the first 24 primes as witnesses.
fn is_probable_prime(n: &BigUint) -> bool {
    const WITNESSES: [u32; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    let one = BigUint::one();
    if *n < BigUint::from(2u8) {
        return false;
    }
    for &w in &WITNESSES {
        let w = BigUint::from(w);
        if *n == w {
            return true;
        }
        if (n % &w).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for &w in &WITNESSES {
        let mut x = BigUint::from(w).modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({:x})", self.0)
    }
}

/// 32-byte pairwise key `CK_{i,j}`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SharedKey(pub [u8; 32]);

impl SharedKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedKey(..)")
    }
}

#[derive(Clone)]
pub struct KeyMaterial {
    client_id: u64,
    secret: BigUint,
    public: GroupElement,
    shared: BTreeMap<u64, SharedKey>,
    params: GroupParams,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("client_id", &self.client_id)
            .field("public", &self.public)
            .field("peers", &self.shared.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl PartialEq for KeyMaterial {
    fn eq(&self, other: &Self) -> bool {
        self.client_id == other.client_id
            && self.secret == other.secret
            && self.public == other.public
            && self.shared == other.shared
    }
}

/// Deterministically derives a key pair for `client_id` from `seed`.
///
/// The secret exponent is `(expand(seed) mod (q - 1)) + 1`, where `expand`
/// produces 16 bytes more than the width of `q` so the reduction bias is
/// below `2^-128`.
pub fn gen_keypair(
    params: &GroupParams,
    client_id: u64,
    seed: &[u8],
) -> Result<KeyMaterial, GroupError> {
    if client_id == 0 {
        return Err(GroupError::ZeroClientId);
    }
    if seed.is_empty() {
        return Err(GroupError::EmptySeed);
    }
    let want = params.order.bits().div_ceil(8) as usize + 16;
    let mut stream = Vec::with_capacity(want + 32);
    let mut counter = 0u32;
    while stream.len() < want {
        let mut h = Sha256::new();
        h.update([KEYGEN_TAG]);
        h.update(counter.to_be_bytes());
        h.update(client_id.to_be_bytes());
        h.update(seed);
        stream.extend_from_slice(&h.finalize());
        counter += 1;
    }
    stream.truncate(want);
    let secret = BigUint::from_bytes_be(&stream) % (&params.order - 1u8) + 1u8;
    let public = params.exp_generator(&secret);
    Ok(KeyMaterial {
        client_id,
        secret,
        public,
        shared: BTreeMap::new(),
        params: params.clone(),
    })
}

/// `H(KDF_TAG || enc(element))`.
pub fn kdf(params: &GroupParams, element: &GroupElement) -> SharedKey {
    let mut h = Sha256::new();
    h.update([KDF_TAG]);
    h.update(params.encode(element));
    SharedKey(h.finalize().into())
}

impl KeyMaterial {
    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    pub fn public_key(&self) -> &GroupElement {
        &self.public
    }

    pub fn public_key_bytes(&self) -> Vec<u8> {
        self.params.encode(&self.public)
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn secret(&self) -> &BigUint {
        &self.secret
    }

    /// Computes `CK = H(peer_pk^sk)` and stores it under `peer_id`.
    pub fn derive_shared(
        &mut self,
        peer_pk: &GroupElement,
        peer_id: u64,
    ) -> Result<SharedKey, GroupError> {
        if peer_id == self.client_id {
            return Err(GroupError::SelfPeer(peer_id));
        }
        if peer_id == 0 {
            return Err(GroupError::ZeroClientId);
        }
        if !self.params.contains(peer_pk) {
            return Err(GroupError::InvalidElement(peer_id));
        }
        let dh = self.params.exp(peer_pk, &self.secret);
        let key = kdf(&self.params, &dh);
        self.shared.insert(peer_id, key);
        Ok(key)
    }

    pub fn shared_key(&self, peer_id: u64) -> Option<&SharedKey> {
        self.shared.get(&peer_id)
    }

    pub fn shared_keys(&self) -> &BTreeMap<u64, SharedKey> {
        &self.shared
    }

    /// Drops the key shared with `peer_id`; returns whether one existed.
    pub fn discard_shared(&mut self, peer_id: u64) -> bool {
        self.shared.remove(&peer_id).is_some()
    }

    /// Replaces a stored key. Only useful for fault-injection tests.
    pub fn overwrite_shared(&mut self, peer_id: u64, key: SharedKey) {
        self.shared.insert(peer_id, key);
    }
}

/// Parses a public-key registry file into validated group elements.
pub fn parse_pk_registry(
    params: &GroupParams,
    text: &str,
) -> Result<BTreeMap<u64, GroupElement>, GroupError> {
    let mut out = BTreeMap::new();
    for (id, bytes) in codec::parse_registry(text)? {
        let pk = params.decode(&bytes)?;
        if !params.contains(&pk) {
            return Err(GroupError::InvalidElement(id));
        }
        out.insert(id, pk);
    }
    Ok(out)
}

pub fn format_pk_registry<'a, I>(params: &GroupParams, keys: I) -> String
where
    I: IntoIterator<Item = (u64, &'a GroupElement)>,
{
    let encoded: Vec<(u64, Vec<u8>)> = keys
        .into_iter()
        .map(|(id, pk)| (id, params.encode(pk)))
        .collect();
    codec::format_registry(encoded.iter().map(|(id, b)| (*id, b.as_slice())))
}
