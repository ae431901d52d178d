//! Signing, sealing, hashing and symmetric encryption used throughout the crate.
//!
//! Every keypair is an Ed25519 signing key. The same key doubles as an X25519
//! agreement key through the birational map to Montgomery form, so a DID's
//! single keypair both signs ledger records and derives the session key of the
//! connection it was minted for.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const NONCE_LEN: usize = 12;

const SEAL_INFO: &[u8] = b"bsmd/seal/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    AuthFailure,
    #[error("invalid public key")]
    InvalidKey,
    #[error("key agreement produced a degenerate secret")]
    WeakAgreement,
    #[error("malformed input: {0}")]
    Malformed(&'static str),
}

/// Decodes lowercase hex only. Upper-case digits are rejected so that every
/// value has exactly one textual encoding.
pub fn decode_hex_strict(s: &str) -> Result<Vec<u8>, String> {
    if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='9' | 'a'..='f')) {
        return Err(format!("invalid hex character {c:?}"));
    }
    hex::decode(s).map_err(|e| e.to_string())
}

fn decode_hex_array<const N: usize>(s: &str) -> Result<[u8; N], String> {
    let bytes = decode_hex_strict(s)?;
    bytes
        .try_into()
        .map_err(|v: Vec<u8>| format!("expected {N} bytes, got {}", v.len()))
}

macro_rules! hex_serde {
    ($ty:ty, $len:expr, $ctor:expr) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.as_bytes()))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let arr = decode_hex_array::<{ $len }>(&s).map_err(serde::de::Error::custom)?;
                $ctor(arr).map_err(serde::de::Error::custom)
            }
        }
    };
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        decode_hex_array(s).map(Digest)
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

hex_serde!(Digest, DIGEST_LEN, |a| Ok::<_, String>(Digest(a)));

pub fn digest(bytes: &[u8]) -> Digest {
    Digest::of(bytes)
}

/// Length-prefixed canonical encoder. Anything that is hashed or signed is
/// first written through this so field boundaries are unambiguous.
#[derive(Default, Clone)]
pub struct Canonical {
    buf: Vec<u8>,
}

impl Canonical {
    pub fn new(domain: &str) -> Self {
        let mut c = Canonical::default();
        c.str(domain);
        c
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.buf)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

hex_serde!(Signature, SIGNATURE_LEN, |a| Ok::<_, String>(Signature(a)));

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; PUBLIC_KEY_LEN]) -> Result<Self, CryptoError> {
        VerifyingKey::from_bytes(&bytes).map_err(|_| CryptoError::InvalidKey)?;
        Ok(PublicKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn verifying_key(&self) -> VerifyingKey {
        // Construction already validated the point.
        VerifyingKey::from_bytes(&self.0).expect("validated public key")
    }

    /// X25519 form of this key.
    pub fn agreement_public(&self) -> [u8; 32] {
        self.verifying_key().to_montgomery().to_bytes()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", hex::encode(&self.0[..8]))
    }
}

hex_serde!(PublicKey, PUBLIC_KEY_LEN, |a| PublicKey::from_bytes(a)
    .map_err(|e| e.to_string()));

/// Signing keypair. The secret half has no `Serialize` impl.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }

    fn agreement_secret(&self) -> [u8; 32] {
        self.signing.to_scalar_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    key.sign(msg)
}

/// Strict Ed25519 verification (rejects malleable and small-order encodings).
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    pk.verifying_key().verify_strict(msg, &sig).is_ok()
}

/// X25519 agreement between a local keypair and a remote public key.
pub fn agree(local: &KeyPair, remote: &PublicKey) -> Result<[u8; 32], CryptoError> {
    let shared = x25519_dalek::x25519(local.agreement_secret(), remote.agreement_public());
    if shared == [0u8; 32] {
        return Err(CryptoError::WeakAgreement);
    }
    Ok(shared)
}

/// 256-bit ChaCha20-Poly1305 key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SymmetricKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// HKDF-SHA256 expansion.
    pub fn derive(salt: &[u8], ikm: &[u8], info: &[u8]) -> Self {
        let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
        let mut okm = [0u8; 32];
        hk.expand(info, &mut okm).expect("32 bytes is a valid HKDF length");
        SymmetricKey(okm)
    }

    pub fn encrypt(&self, nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let cipher = ChaCha20Poly1305::new((&self.0).into());
        cipher
            .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
            .expect("in-memory encryption cannot fail")
    }

    pub fn decrypt(&self, nonce: &[u8; NONCE_LEN], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let cipher = ChaCha20Poly1305::new((&self.0).into());
        cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
            .map_err(|_| CryptoError::AuthFailure)
    }

    /// `nonce || ciphertext` framing used for data at rest.
    pub fn seal_framed(&self, nonce: [u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut out = nonce.to_vec();
        out.extend(self.encrypt(&nonce, aad, plaintext));
        out
    }

    pub fn open_framed(&self, aad: &[u8], framed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if framed.len() < NONCE_LEN {
            return Err(CryptoError::Malformed("framed ciphertext too short"));
        }
        let (nonce, ct) = framed.split_at(NONCE_LEN);
        self.decrypt(nonce.try_into().unwrap(), aad, ct)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// Anonymous public-key encryption: ephemeral X25519, HKDF, ChaCha20-Poly1305.
/// Output layout is `ephemeral_pub(32) || nonce(12) || ciphertext`.
pub fn seal<R: RngCore + CryptoRng>(recipient: &PublicKey, plaintext: &[u8], rng: &mut R) -> Vec<u8> {
    let mut eph = [0u8; 32];
    rng.fill_bytes(&mut eph);
    let eph_pub = x25519_dalek::x25519(eph, x25519_dalek::X25519_BASEPOINT_BYTES);
    let shared = x25519_dalek::x25519(eph, recipient.agreement_public());
    let key = SymmetricKey::derive(&eph_pub, &shared, SEAL_INFO);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut out = eph_pub.to_vec();
    out.extend(key.seal_framed(nonce, recipient.as_bytes(), plaintext));
    out
}

pub fn open(recipient: &KeyPair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < 32 + NONCE_LEN {
        return Err(CryptoError::AuthFailure);
    }
    let (eph_pub, rest) = ciphertext.split_at(32);
    let eph_pub: [u8; 32] = eph_pub.try_into().unwrap();
    let shared = x25519_dalek::x25519(recipient.agreement_secret(), eph_pub);
    let key = SymmetricKey::derive(&eph_pub, &shared, SEAL_INFO);
    key.open_framed(recipient.public().as_bytes(), rest)
        .map_err(|_| CryptoError::AuthFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    #[test]
    fn sign_verify_roundtrip() {
        let kp = KeyPair::generate(&mut rng());
        let sig = sign(&kp, b"hello");
        assert!(verify(&kp.public(), b"hello", &sig));
        assert!(!verify(&kp.public(), b"hellp", &sig));
    }

    #[test]
    fn verify_rejects_other_key() {
        let mut r = rng();
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        assert!(!verify(&b.public(), b"m", &a.sign(b"m")));
    }

    #[test]
    fn seal_open_roundtrip_and_tamper() {
        let mut r = rng();
        let kp = KeyPair::generate(&mut r);
        let ct = seal(&kp.public(), b"origin:markham", &mut r);
        assert_eq!(open(&kp, &ct).unwrap(), b"origin:markham");
        for i in 0..ct.len() {
            let mut bad = ct.clone();
            bad[i] ^= 0x01;
            assert_eq!(open(&kp, &bad), Err(CryptoError::AuthFailure), "byte {i}");
        }
    }

    #[test]
    fn open_with_wrong_key_fails() {
        let mut r = rng();
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        let ct = seal(&a.public(), b"x", &mut r);
        assert_eq!(open(&b, &ct), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn agreement_is_symmetric() {
        let mut r = rng();
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        assert_eq!(agree(&a, &b.public()).unwrap(), agree(&b, &a.public()).unwrap());
    }

    #[test]
    fn digest_is_deterministic() {
        assert_eq!(digest(b"abc"), digest(b"abc"));
        assert_eq!(
            digest(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn strict_hex_rejects_uppercase() {
        assert!(decode_hex_strict("ab").is_ok());
        assert!(decode_hex_strict("aB").is_err());
        assert!(Digest::from_hex(&"0".repeat(63)).is_err());
    }

    #[test]
    fn canonical_encoding_separates_fields() {
        let mut a = Canonical::new("t");
        a.str("ab").str("c");
        let mut b = Canonical::new("t");
        b.str("a").str("bc");
        assert_ne!(a.digest(), b.digest());
    }
}
