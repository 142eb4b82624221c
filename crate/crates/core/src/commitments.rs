//! Hash commitments over nonce-appended canonical encodings and the
//! hash-chain rule linking consecutive intervals.

use crate::fixedpoint::{FixedError, FixedTensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use std::fmt;
use std::sync::Mutex;
use thiserror::Error;

pub const NONCE_LEN: usize = 16;

/// Labels of the carried interval state, in chain order.
pub const CHAIN_LABELS: [&str; 5] = ["x", "P", "r_acc", "S_acc", "kappa"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitError {
    #[error("label misalignment at position {index}: {left:?} vs {right:?}")]
    LabelMismatch { index: usize, left: String, right: String },
    #[error("commitment lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed nonce-appended value: {0}")]
    Malformed(String),
    #[error("random number generator unavailable: {0}")]
    RngUnavailable(String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

pub type Result<T> = std::result::Result<T, CommitError>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| CommitError::Malformed(format!("digest hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CommitError::Malformed("digest must be 32 bytes".into()))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    /// All-zero nonce used for public constants (window-start accumulators).
    pub const ZERO: Nonce = Nonce([0; NONCE_LEN]);
}

impl Serialize for Nonce {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Nonce {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; NONCE_LEN] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("nonce must be 16 bytes"))?;
        Ok(Nonce(arr))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash several byte strings as one preimage.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitValue {
    Tensor(FixedTensor),
    Bit(bool),
}

impl CommitValue {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        match self {
            CommitValue::Tensor(t) => t.canonical_bytes(),
            CommitValue::Bit(b) => vec![*b as u8],
        }
    }
}

/// Digest of `label ‖ payload`, where the label is length-prefixed.
fn labeled_digest(label: &str, payload: &[u8]) -> Digest {
    hash_parts(&[&(label.len() as u32).to_le_bytes(), label.as_bytes(), payload])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opening {
    #[serde(with = "hex::serde")]
    pub value: Vec<u8>,
    pub nonce: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitmentRecord {
    pub label: String,
    pub digest: Digest,
    /// Prover-side only; never serialized to a verifier.
    #[serde(skip)]
    pub opened: Option<Opening>,
}

impl CommitmentRecord {
    /// Drop the opening, keeping only what a verifier may see.
    pub fn public(&self) -> Self {
        Self { label: self.label.clone(), digest: self.digest, opened: None }
    }

    pub fn verify_opening(&self) -> bool {
        match &self.opened {
            Some(o) => {
                let mut payload = o.value.clone();
                payload.extend_from_slice(&o.nonce.0);
                labeled_digest(&self.label, &payload) == self.digest
            }
            None => false,
        }
    }
}

pub fn commit(label: &str, value: &CommitValue, nonce: Nonce) -> CommitmentRecord {
    let value = value.canonical_bytes();
    NonceAppended::from_parts(&value, nonce).record(label, value)
}

/// A value's canonical encoding followed by its 16-byte nonce.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NonceAppended {
    bytes: Vec<u8>,
}

impl NonceAppended {
    fn from_parts(value: &[u8], nonce: Nonce) -> Self {
        let mut bytes = Vec::with_capacity(value.len() + NONCE_LEN);
        bytes.extend_from_slice(value);
        bytes.extend_from_slice(&nonce.0);
        Self { bytes }
    }

    pub fn tensor(t: &FixedTensor, nonce: Nonce) -> Self {
        Self::from_parts(&t.canonical_bytes(), nonce)
    }

    pub fn bit(b: bool, nonce: Nonce) -> Self {
        Self::from_parts(&[b as u8], nonce)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn split(&self) -> Result<(&[u8], Nonce)> {
        if self.bytes.len() <= NONCE_LEN {
            return Err(CommitError::Malformed("value shorter than its nonce".into()));
        }
        let (value, nonce) = self.bytes.split_at(self.bytes.len() - NONCE_LEN);
        Ok((value, Nonce(nonce.try_into().unwrap())))
    }

    pub fn nonce(&self) -> Result<Nonce> {
        Ok(self.split()?.1)
    }

    pub fn open_tensor(&self) -> Result<FixedTensor> {
        let (value, _) = self.split()?;
        let (t, used) = FixedTensor::from_canonical_bytes(value)
            .map_err(|e| CommitError::Malformed(format!("tensor: {e}")))?;
        if used != value.len() {
            return Err(CommitError::Malformed("trailing bytes before nonce".into()));
        }
        Ok(t)
    }

    pub fn open_bit(&self) -> Result<bool> {
        match self.split()?.0 {
            [0] => Ok(false),
            [1] => Ok(true),
            _ => Err(CommitError::Malformed("bit must encode as a single 0x00 or 0x01 byte".into())),
        }
    }

    pub fn digest(&self, label: &str) -> Digest {
        labeled_digest(label, &self.bytes)
    }

    fn record(&self, label: &str, value: Vec<u8>) -> CommitmentRecord {
        let nonce = Nonce(self.bytes[self.bytes.len() - NONCE_LEN..].try_into().unwrap());
        CommitmentRecord { label: label.into(), digest: self.digest(label), opened: Some(Opening { value, nonce }) }
    }

    pub fn commitment(&self, label: &str) -> Result<CommitmentRecord> {
        let (value, _) = self.split()?;
        Ok(self.record(label, value.to_vec()))
    }
}

/// `true` iff the outputs of one interval are exactly the inputs of the next.
pub fn chain_check(out_prev: &[CommitmentRecord], in_next: &[CommitmentRecord]) -> Result<bool> {
    if out_prev.len() != in_next.len() {
        return Err(CommitError::LengthMismatch(out_prev.len(), in_next.len()));
    }
    for (index, (a, b)) in out_prev.iter().zip(in_next).enumerate() {
        if a.label != b.label {
            return Err(CommitError::LabelMismatch { index, left: a.label.clone(), right: b.label.clone() });
        }
    }
    Ok(out_prev.iter().zip(in_next).all(|(a, b)| a.digest == b.digest))
}

/// Thread-safe nonce generator. Seeded in test mode, OS-seeded otherwise.
pub struct NonceSource {
    rng: Mutex<ChaCha20Rng>,
}

impl NonceSource {
    pub fn seeded(seed: u64) -> Self {
        Self { rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)) }
    }

    pub fn from_os() -> Result<Self> {
        let rng = ChaCha20Rng::try_from_os_rng().map_err(|e| CommitError::RngUnavailable(e.to_string()))?;
        Ok(Self { rng: Mutex::new(rng) })
    }

    pub fn gen_nonce(&self) -> Result<Nonce> {
        let mut rng = self.rng.lock().map_err(|_| CommitError::RngUnavailable("generator lock poisoned".into()))?;
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        Ok(Nonce(n))
    }
}

impl fmt::Debug for NonceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NonceSource")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tensor(vals: &[f64]) -> FixedTensor {
        FixedTensor::quantize_slice(vec![vals.len()], vals, 10).unwrap()
    }

    #[test]
    fn hash_vectors() {
        assert_eq!(hash(b"abc"), hash(b"abc"));
        assert_ne!(hash(b"abc"), hash(b"abc\0"));
        assert_eq!(hash(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(hash(b"abc").to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(hash_parts(&[b"ab", b"c"]), hash(b"abc"));
    }

    #[test]
    fn commit_examples() {
        let src = NonceSource::seeded(1);
        let v = CommitValue::Tensor(tensor(&[1.0, -2.5]));
        let n = src.gen_nonce().unwrap();
        assert_eq!(commit("x", &v, n).digest, commit("x", &v, n).digest);
        assert_ne!(commit("x", &v, n).digest, commit("x", &v, src.gen_nonce().unwrap()).digest);
        assert_ne!(commit("kappa", &CommitValue::Bit(true), n).digest, commit("kappa", &CommitValue::Bit(false), n).digest);
        // domain separation by label
        assert_ne!(commit("x", &v, n).digest, commit("P", &v, n).digest);
    }

    #[test]
    fn record_opening_and_sealed_form_agree() {
        let t = tensor(&[0.5, 0.25, 3.0]);
        let n = NonceSource::seeded(2).gen_nonce().unwrap();
        let rec = commit("r_acc", &CommitValue::Tensor(t.clone()), n);
        assert!(rec.verify_opening());
        assert!(!rec.public().verify_opening());
        let sealed = NonceAppended::tensor(&t, n);
        assert_eq!(sealed.digest("r_acc"), rec.digest);
        assert_eq!(sealed.open_tensor().unwrap(), t);
        assert_eq!(sealed.nonce().unwrap(), n);
        let mut bad = rec.clone();
        bad.opened.as_mut().unwrap().value[6] ^= 1;
        assert!(!bad.verify_opening());
    }

    #[test]
    fn malformed_sealed_values() {
        assert!(NonceAppended::from_bytes(vec![1, 2, 3]).open_tensor().is_err());
        let mut b = tensor(&[1.0]).canonical_bytes();
        b.push(7);
        b.extend_from_slice(&[0; NONCE_LEN]);
        assert!(NonceAppended::from_bytes(b).open_tensor().is_err());
        let mut bit = vec![2];
        bit.extend_from_slice(&[0; NONCE_LEN]);
        assert!(NonceAppended::from_bytes(bit).open_bit().is_err());
        assert!(NonceAppended::bit(true, Nonce::ZERO).open_bit().unwrap());
    }

    fn chain(src: &NonceSource) -> Vec<CommitmentRecord> {
        CHAIN_LABELS
            .iter()
            .enumerate()
            .map(|(i, l)| commit(l, &CommitValue::Tensor(tensor(&[i as f64])), src.gen_nonce().unwrap()))
            .collect()
    }

    #[test]
    fn chain_check_examples() {
        let src = NonceSource::seeded(3);
        let out = chain(&src);
        let public: Vec<_> = out.iter().map(|r| r.public()).collect();
        assert!(chain_check(&out, &public).unwrap());
        let stale = chain(&src);
        let mut broken = public.clone();
        broken[2] = stale[2].clone();
        assert!(!chain_check(&out, &broken).unwrap());
        let mut reordered = public.clone();
        reordered.swap(0, 1);
        assert!(matches!(chain_check(&out, &reordered), Err(CommitError::LabelMismatch { .. })));
        assert!(chain_check(&out, &public[..4]).is_err());
    }

    #[test]
    fn nonces_unique_and_seeded() {
        let src = NonceSource::seeded(9);
        let draws: HashSet<_> = (0..10_000).map(|_| src.gen_nonce().unwrap()).collect();
        assert_eq!(draws.len(), 10_000);
        let a = NonceSource::seeded(9);
        let b = NonceSource::seeded(9);
        assert_eq!(a.gen_nonce().unwrap(), b.gen_nonce().unwrap());
        assert_ne!(NonceSource::seeded(10).gen_nonce().unwrap(), NonceSource::seeded(11).gen_nonce().unwrap());
        assert!(NonceSource::from_os().unwrap().gen_nonce().is_ok());
    }

    #[test]
    fn binding_over_many_pairs() {
        use rand::Rng;
        let src = NonceSource::seeded(4);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut seen = HashSet::new();
        let mut preimages = HashSet::new();
        for _ in 0..100_000 {
            let raw: i64 = rng.random_range(-1000..1000);
            let t = FixedTensor::from_raw(vec![1], vec![raw], 8).unwrap();
            let n = src.gen_nonce().unwrap();
            if preimages.insert((raw, n)) {
                assert!(seen.insert(commit("x", &CommitValue::Tensor(t), n).digest));
            }
        }
    }

    #[test]
    fn hiding_prefixes_look_random() {
        let src = NonceSource::seeded(5);
        let v = CommitValue::Tensor(tensor(&[42.0]));
        let mut prefixes = HashSet::new();
        let mut repeats = 0usize;
        for _ in 0..1000 {
            let d = commit("x", &v, src.gen_nonce().unwrap()).digest;
            if !prefixes.insert([d.0[0], d.0[1], d.0[2], d.0[3]]) {
                repeats += 1;
            }
        }
        // birthday expectation for 1000 draws over 2^32 is about 1.2e-4
        let expected = 1000.0 * 999.0 / 2.0 / 2f64.powi(32);
        assert!((repeats as f64) <= expected + 3.0 * expected.sqrt().max(1.0));
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = hash(b"round trip");
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json.len(), 66);
        let back: Digest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert!(Digest::from_hex("abcd").is_err());
    }
}
