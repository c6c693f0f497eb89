//! Seed derivation. Every random stream in a run is keyed off the run seed
//! plus a domain tag and a few integers, so streams never overlap and the
//! order in which components draw does not matter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{canonical_hash, Encoder};

pub fn derive_seed(base: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut e = Encoder::new();
    e.str(domain).u64(base);
    for p in parts {
        e.u64(*p);
    }
    let d = canonical_hash(&e.finish());
    u64::from_be_bytes(d.0[..8].try_into().unwrap())
}

pub fn stream(base: u64, domain: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, domain, parts))
}

/// Stable integer for a string id, used to fold node ids into seed parts.
pub fn id_part(id: &str) -> u64 {
    let d = canonical_hash(id.as_bytes());
    u64::from_be_bytes(d.0[..8].try_into().unwrap())
}
