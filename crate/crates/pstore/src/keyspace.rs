//! The 160-bit circular key space: key generation, content hashing and
//! ring-interval arithmetic used by routing and replica placement.
//!
//! Keys, GUIDs, PIDs and node identifiers all live on the same ring.
//! GUIDs are drawn from the seeded simulation RNG; PIDs are SHA-1 content
//! hashes, which natively produce the 160-bit width the ring uses.

use crate::error::{Error, Result};
use rand::RngCore;
use sha1::{Digest, Sha1};
use std::fmt;

/// Width of a key in bytes (160 bits).
pub const KEY_BYTES: usize = 20;

/// A point on the 160-bit circular key space.
///
/// The serialized form is exactly 40 lowercase hexadecimal characters.
/// Ordering is the plain big-endian byte order; ring intervals are computed
/// with [`in_ring`], which handles wraparound.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key([u8; KEY_BYTES]);

impl Key {
    pub fn from_bytes(bytes: [u8; KEY_BYTES]) -> Key {
        Key(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_BYTES] {
        &self.0
    }

    /// Embeds a small integer into the low 64 bits of the ring.
    ///
    /// Handy for toy rings in tests; wraparound behaviour is identical at
    /// every scale because interval logic only compares keys.
    pub fn from_u64(v: u64) -> Key {
        let mut bytes = [0u8; KEY_BYTES];
        bytes[KEY_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        Key(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Key> {
        if s.len() != 2 * KEY_BYTES {
            return Err(Error::DecodeError(format!(
                "key must be {} hex chars, got {}",
                2 * KEY_BYTES,
                s.len()
            )));
        }
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::DecodeError("key hex must be lowercase".into()));
        }
        let raw = hex::decode(s).map_err(|e| Error::DecodeError(e.to_string()))?;
        let mut bytes = [0u8; KEY_BYTES];
        bytes.copy_from_slice(&raw);
        Ok(Key(bytes))
    }

    /// `(self + 2^i) mod 2^160`, used for finger-table targets.
    pub fn add_pow2(&self, i: u32) -> Key {
        assert!(i < 160, "exponent outside the key space");
        let byte = KEY_BYTES - 1 - (i / 8) as usize;
        let mut out = self.0;
        let mut carry = 1u8 << (i % 8);
        for pos in (0..=byte).rev() {
            let (sum, overflow) = out[pos].overflowing_add(carry);
            out[pos] = sum;
            if !overflow {
                break;
            }
            carry = 1;
        }
        Key(out)
    }

    /// SHA-1 digest of arbitrary bytes, the content hash behind PIDs.
    pub fn digest(data: &[u8]) -> Key {
        let mut hasher = Sha1::new();
        hasher.update(data);
        let out = hasher.finalize();
        let mut bytes = [0u8; KEY_BYTES];
        bytes.copy_from_slice(&out);
        Key(bytes)
    }

    /// Draws a fresh uniformly distributed key from the given RNG.
    pub fn random(rng: &mut impl RngCore) -> Key {
        let mut bytes = [0u8; KEY_BYTES];
        rng.fill_bytes(&mut bytes);
        Key(bytes)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", self.to_hex())
    }
}

/// True iff `k` lies in the half-open clockwise interval `(lo, hi]`.
///
/// When `lo == hi` the interval covers the whole ring, which is what a
/// single-node ring needs: that node is responsible for every key.
pub fn in_ring(k: Key, lo: Key, hi: Key) -> bool {
    if lo == hi {
        return true;
    }
    if lo < hi {
        lo < k && k <= hi
    } else {
        k > lo || k <= hi
    }
}

/// Location-independent object identity, randomly generated.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Guid(pub Key);

impl fmt::Display for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Guid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Guid({})", self.0.to_hex())
    }
}

/// Identity of one immutable serialized object state: the content hash of
/// the state bytes. Equal data always yields an equal PID, on every node
/// and in every run.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub Key);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pid({})", self.0.to_hex())
    }
}

/// Content hash of a data blob; the pure function behind every PID.
pub fn generate_pid(data: &[u8]) -> Pid {
    Pid(Key::digest(data))
}

/// Application identifier selecting one of the six storage services hosted
/// on every node. The numeric tags are fixed for wire and file encoding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Aid {
    NameDir,
    VersionDir,
    ObjectDir,
    DataStore,
    CodeStore,
    PolicyStore,
}

impl Aid {
    pub const ALL: [Aid; 6] = [
        Aid::NameDir,
        Aid::VersionDir,
        Aid::ObjectDir,
        Aid::DataStore,
        Aid::CodeStore,
        Aid::PolicyStore,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Aid::NameDir => 1,
            Aid::VersionDir => 2,
            Aid::ObjectDir => 3,
            Aid::DataStore => 4,
            Aid::CodeStore => 5,
            Aid::PolicyStore => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Aid> {
        Aid::ALL.into_iter().find(|aid| aid.tag() == tag)
    }
}

impl fmt::Display for Aid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn guid_stream_is_a_pure_function_of_the_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let g1 = Key::random(&mut a);
        let g1_again = Key::random(&mut b);
        assert_eq!(g1, g1_again);
        let g2 = Key::random(&mut a);
        assert_ne!(g1, g2);
    }

    #[test]
    fn guid_allocation_collision_scan() {
        // 1000 seeds, 100 draws each: the combined set must be collision free.
        let mut seen = HashSet::new();
        for seed in 1..=1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                assert!(seen.insert(Key::random(&mut rng)), "GUID collision");
            }
        }
        assert_eq!(seen.len(), 100_000);
    }

    #[test]
    fn digest_known_answers() {
        // Published SHA-1 vectors, independent of this implementation.
        assert_eq!(
            Key::digest(b"").to_hex(),
            "da39a3ee5e6b4b0d3255bfef95601890afd80709"
        );
        assert_eq!(
            Key::digest(b"abc").to_hex(),
            "a9993e364706816aba3e25717850c26c9cd0d89d"
        );
        assert_eq!(generate_pid(b"abc"), generate_pid(b"abc"));
    }

    #[test]
    fn pid_collision_scan_over_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pids = HashSet::new();
        let mut blobs = HashSet::new();
        for _ in 0..10_000 {
            let len = (rng.next_u32() % 64) as usize;
            let mut data = vec![0u8; len];
            rng.fill_bytes(&mut data);
            if blobs.insert(data.clone()) {
                assert!(pids.insert(generate_pid(&data)), "PID collision");
            }
        }
    }

    #[test]
    fn hex_form_is_40_lowercase_chars_and_round_trips() {
        let k = Key::digest(b"sample");
        let hex = k.to_hex();
        assert_eq!(hex.len(), 40);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(Key::from_hex(&hex).unwrap(), k);
        assert!(Key::from_hex(&hex.to_uppercase()).is_err());
        assert!(Key::from_hex("abc").is_err());
    }

    #[test]
    fn in_ring_simple_and_wraparound() {
        let k = Key::from_u64;
        assert!(in_ring(k(5), k(3), k(10)));
        assert!(!in_ring(k(3), k(3), k(10)));
        assert!(in_ring(k(10), k(3), k(10)));
        // wraparound on a toy 8-bit ring embedded in the low bits
        assert!(in_ring(k(2), k(250), k(10)));
        assert!(in_ring(k(255), k(250), k(10)));
        assert!(!in_ring(k(100), k(250), k(10)));
    }

    /// Naive oracle on a 6-bit modular ring.
    fn in_ring_oracle(k: u64, lo: u64, hi: u64) -> bool {
        if lo == hi {
            return true;
        }
        // walk clockwise from lo+1 to hi inclusive
        let mut cur = (lo + 1) % 64;
        loop {
            if cur == k {
                return true;
            }
            if cur == hi {
                return false;
            }
            cur = (cur + 1) % 64;
        }
    }

    #[test]
    fn in_ring_matches_exhaustive_oracle_on_6_bit_ring() {
        for k in 0..64u64 {
            for lo in 0..64u64 {
                for hi in 0..64u64 {
                    assert_eq!(
                        in_ring(Key::from_u64(k), Key::from_u64(lo), Key::from_u64(hi)),
                        in_ring_oracle(k, lo, hi),
                        "mismatch at k={k} lo={lo} hi={hi}"
                    );
                }
            }
        }
    }

    #[test]
    fn add_pow2_carries_across_bytes_and_wraps() {
        let k = Key::from_u64(0xff);
        assert_eq!(k.add_pow2(0), Key::from_u64(0x100));
        assert_eq!(Key::from_u64(1).add_pow2(8), Key::from_u64(257));
        // wrap at the top of the space
        let top = Key::from_bytes([0xff; KEY_BYTES]);
        let wrapped = top.add_pow2(0);
        assert_eq!(wrapped, Key::from_bytes([0u8; KEY_BYTES]));
        let mid = Key::from_bytes({
            let mut b = [0u8; KEY_BYTES];
            b[0] = 0x80;
            b
        });
        assert_eq!(mid.add_pow2(159), Key::from_bytes([0u8; KEY_BYTES]));
    }

    #[test]
    fn aid_tags_are_fixed_and_distinct() {
        let tags: Vec<u8> = Aid::ALL.iter().map(|a| a.tag()).collect();
        assert_eq!(tags, vec![1, 2, 3, 4, 5, 6]);
        for aid in Aid::ALL {
            assert_eq!(Aid::from_tag(aid.tag()), Some(aid));
        }
        assert_eq!(Aid::from_tag(0), None);
        assert_eq!(Aid::from_tag(7), None);
    }
}
