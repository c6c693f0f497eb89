//! Authenticated, replay-protected envelopes between edge nodes, the cloud
//! aggregator and the ledger.
//!
//! Payloads are sealed with XChaCha20-Poly1305 under pre-shared pairwise
//! keys. Sender, receiver and the freshness tag are bound as associated data,
//! so re-addressing or re-dating an envelope breaks authentication.

use std::collections::{BTreeMap, BTreeSet};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::seed;
use crate::telemetry::NodeId;

pub const CLOUD: &str = "cloud";
pub const LEDGER: &str = "ledger";

pub type Key = [u8; 32];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("authentication failed")]
    Tampered,
    #[error("nonce {0:032x} already seen")]
    Replayed(u128),
    #[error("timestamp {timestamp} outside window at tick {now}")]
    Stale { timestamp: u64, now: u64 },
    #[error("no key registered between {0} and {1}")]
    UnknownSender(String, String),
    #[error("envelope addressed to {to}, delivered to {at}")]
    Misaddressed { to: String, at: String },
    #[error("sender reused nonce {0:032x}")]
    NonceReuse(u128),
    #[error("sender clock went backwards")]
    ClockRegression,
    #[error("malformed envelope: {0}")]
    Malformed(#[from] DecodeError),
}

impl ChannelError {
    pub fn label(&self) -> &'static str {
        match self {
            ChannelError::Tampered => "tampered",
            ChannelError::Replayed(_) => "replayed",
            ChannelError::Stale { .. } => "stale",
            ChannelError::UnknownSender(..) => "unknown_sender",
            ChannelError::Misaddressed { .. } => "misaddressed",
            ChannelError::NonceReuse(_) => "nonce_reuse",
            ChannelError::ClockRegression => "clock_regression",
            ChannelError::Malformed(_) => "malformed",
        }
    }
}

/// Nonce, simulated-clock tick and round that make a message rejectable when
/// old or duplicated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FreshnessTag {
    pub nonce: u128,
    pub timestamp: u64,
    pub round: u64,
}

impl FreshnessTag {
    pub fn encode_into(&self, e: &mut Encoder) {
        e.u128(self.nonce).u64(self.timestamp).u64(self.round);
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            nonce: d.u128()?,
            timestamp: d.u64()?,
            round: d.u64()?,
        })
    }
}

// JSON form keeps the nonce as a hex string; u128 does not survive every JSON reader.
impl Serialize for FreshnessTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("FreshnessTag", 3)?;
        st.serialize_field("nonce", &format!("{:032x}", self.nonce))?;
        st.serialize_field("timestamp", &self.timestamp)?;
        st.serialize_field("round", &self.round)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for FreshnessTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            nonce: String,
            timestamp: u64,
            round: u64,
        }
        let r = Raw::deserialize(d)?;
        let nonce = u128::from_str_radix(&r.nonce, 16).map_err(serde::de::Error::custom)?;
        Ok(FreshnessTag {
            nonce,
            timestamp: r.timestamp,
            round: r.round,
        })
    }
}

/// Pre-shared symmetric keys. `k_pb` is provisioned for completeness; no
/// protocol step routes traffic directly between an edge node and the ledger.
#[derive(Clone, Debug)]
pub struct KeyRegistry {
    pub k_pc: BTreeMap<NodeId, Key>,
    pub k_bc: Key,
    pub k_pb: BTreeMap<NodeId, Key>,
}

impl KeyRegistry {
    pub fn generate(run_seed: u64, nodes: &[NodeId]) -> Self {
        let key = |domain: &str, id: &str| -> Key {
            let mut rng = seed::stream(run_seed, domain, &[seed::id_part(id)]);
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            k
        };
        Self {
            k_pc: nodes.iter().map(|n| (n.clone(), key("key-pc", n))).collect(),
            k_bc: key("key-bc", ""),
            k_pb: nodes.iter().map(|n| (n.clone(), key("key-pb", n))).collect(),
        }
    }

    /// Key shared by two parties, in either order.
    pub fn key_between(&self, a: &str, b: &str) -> Option<&Key> {
        match (a, b) {
            (CLOUD, LEDGER) | (LEDGER, CLOUD) => Some(&self.k_bc),
            (CLOUD, n) | (n, CLOUD) => self.k_pc.get(n),
            (LEDGER, n) | (n, LEDGER) => self.k_pb.get(n),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub sender: String,
    pub receiver: String,
    pub freshness: FreshnessTag,
    pub ciphertext: Vec<u8>,
    pub auth_tag: [u8; 16],
}

fn associated_data(sender: &str, receiver: &str, f: &FreshnessTag) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str("iovfl-envelope-v1").str(sender).str(receiver);
    f.encode_into(&mut e);
    e.finish()
}

fn aead_nonce(f: &FreshnessTag) -> XNonce {
    let mut n = [0u8; 24];
    n[..16].copy_from_slice(&f.nonce.to_be_bytes());
    n[16..].copy_from_slice(&f.timestamp.to_be_bytes());
    XNonce::from(n)
}

impl Envelope {
    /// Canonical wire bytes: fields in declaration order, big-endian,
    /// variable-length fields length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.str(&self.sender).str(&self.receiver);
        self.freshness.encode_into(&mut e);
        e.bytes(&self.ciphertext).fixed(&self.auth_tag);
        e.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(b);
        let sender = d.str()?;
        let receiver = d.str()?;
        let freshness = FreshnessTag::decode_from(&mut d)?;
        let ciphertext = d.bytes()?.to_vec();
        let auth_tag = d.fixed::<16>()?;
        d.finish()?;
        Ok(Self {
            sender,
            receiver,
            freshness,
            ciphertext,
            auth_tag,
        })
    }
}

/// Stateless sealing primitive. Callers are responsible for nonce freshness;
/// honest parties go through [`Endpoint::seal`].
pub fn seal_raw(key: &Key, sender: &str, receiver: &str, freshness: FreshnessTag, payload: &[u8]) -> Envelope {
    let cipher = XChaCha20Poly1305::new(key.into());
    let aad = associated_data(sender, receiver, &freshness);
    let mut out = cipher
        .encrypt(
            &aead_nonce(&freshness),
            Payload {
                msg: payload,
                aad: &aad,
            },
        )
        .expect("in-memory encryption cannot fail");
    let tag_start = out.len() - 16;
    let auth_tag: [u8; 16] = out[tag_start..].try_into().unwrap();
    out.truncate(tag_start);
    Envelope {
        sender: sender.to_string(),
        receiver: receiver.to_string(),
        freshness,
        ciphertext: out,
        auth_tag,
    }
}

fn decrypt(key: &Key, env: &Envelope) -> Result<Vec<u8>, ChannelError> {
    let cipher = XChaCha20Poly1305::new(key.into());
    let aad = associated_data(&env.sender, &env.receiver, &env.freshness);
    let mut ct = env.ciphertext.clone();
    ct.extend_from_slice(&env.auth_tag);
    cipher
        .decrypt(&aead_nonce(&env.freshness), Payload { msg: &ct, aad: &aad })
        .map_err(|_| ChannelError::Tampered)
}

/// Authenticates, then checks replay and the freshness window. The nonce is
/// recorded only when every check passes.
pub fn open(
    key: &Key,
    env: &Envelope,
    window: u64,
    seen: &mut BTreeSet<u128>,
    now: u64,
) -> Result<Vec<u8>, ChannelError> {
    let plain = decrypt(key, env)?;
    if seen.contains(&env.freshness.nonce) {
        return Err(ChannelError::Replayed(env.freshness.nonce));
    }
    let ts = env.freshness.timestamp;
    if ts > now || now - ts > window {
        return Err(ChannelError::Stale { timestamp: ts, now });
    }
    seen.insert(env.freshness.nonce);
    Ok(plain)
}

/// A sending party: issues fresh nonces and refuses to reuse one.
#[derive(Clone, Debug)]
pub struct Endpoint {
    pub id: String,
    used: BTreeSet<u128>,
    last_timestamp: u64,
    rng: ChaCha8Rng,
}

impl Endpoint {
    pub fn new(id: &str, run_seed: u64) -> Self {
        Self {
            id: id.to_string(),
            used: BTreeSet::new(),
            last_timestamp: 0,
            rng: seed::stream(run_seed, "endpoint-nonce", &[seed::id_part(id)]),
        }
    }

    pub fn next_freshness(&mut self, now: u64, round: u64) -> FreshnessTag {
        loop {
            let nonce: u128 = self.rng.random();
            if !self.used.contains(&nonce) {
                return FreshnessTag {
                    nonce,
                    timestamp: now,
                    round,
                };
            }
        }
    }

    pub fn seal(
        &mut self,
        key: &Key,
        receiver: &str,
        freshness: FreshnessTag,
        payload: &[u8],
    ) -> Result<Envelope, ChannelError> {
        if self.used.contains(&freshness.nonce) {
            return Err(ChannelError::NonceReuse(freshness.nonce));
        }
        if freshness.timestamp < self.last_timestamp {
            return Err(ChannelError::ClockRegression);
        }
        self.used.insert(freshness.nonce);
        self.last_timestamp = freshness.timestamp;
        Ok(seal_raw(key, &self.id, receiver, freshness, payload))
    }
}

/// A receiving party's replay state.
#[derive(Clone, Debug, Default)]
pub struct Inbox {
    pub owner: String,
    pub seen: BTreeSet<u128>,
}

impl Inbox {
    pub fn new(owner: &str) -> Self {
        Self {
            owner: owner.to_string(),
            seen: BTreeSet::new(),
        }
    }

    /// Looks up the key for the claimed sender and opens the envelope.
    pub fn receive(
        &mut self,
        keys: &KeyRegistry,
        env: &Envelope,
        window: u64,
        now: u64,
    ) -> Result<Vec<u8>, ChannelError> {
        if env.receiver != self.owner {
            return Err(ChannelError::Misaddressed {
                to: env.receiver.clone(),
                at: self.owner.clone(),
            });
        }
        let key = keys
            .key_between(&env.sender, &self.owner)
            .ok_or_else(|| ChannelError::UnknownSender(env.sender.clone(), self.owner.clone()))?;
        open(key, env, window, &mut self.seen, now)
    }
}
